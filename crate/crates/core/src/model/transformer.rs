//! Pre-norm decoder-only transformer with learned positional embeddings and
//! residual-stream taps.
//!
//! "Residual stream at layer L" means the output of block L after both of its
//! residual additions, before block L+1's normalization. Probes and patches
//! read and write at exactly that point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::graph::{Graph, Mask, NodeId};
use crate::numerics::params::ParameterStore;
use crate::numerics::real::Real;
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Base,
    Tuned,
}

/// Per-token residual-stream vectors at one layer, completion tokens only.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub layer: usize,
    /// (t, d_model) rows, one per completion token.
    pub vectors: Tensor<f32>,
    pub token_ids: Vec<u32>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub config: ModelConfig,
    pub params: ParameterStore<f32>,
    pub role: ModelRole,
}

impl PolicyModel {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let d = config.d_model;
        let v = config.vocab_size;
        // GPT-2 style init; residual projections are shrunk with depth.
        let w_std = 0.02f32;
        let resid_std = w_std / (2.0 * config.n_layers as f32).sqrt();
        params.insert("tok_emb", rng.normal_tensor(vec![v, d], w_std));
        params.insert("pos_emb", rng.normal_tensor(vec![config.max_seq_len, d], 0.01));
        for i in 0..config.n_layers {
            let p = format!("blocks.{i}");
            params.insert(&format!("{p}.ln1.g"), Tensor::full(vec![d], 1.0));
            params.insert(&format!("{p}.ln1.b"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.attn.wq"), rng.normal_tensor(vec![d, d], w_std));
            params.insert(&format!("{p}.attn.bq"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.attn.wk"), rng.normal_tensor(vec![d, d], w_std));
            params.insert(&format!("{p}.attn.bk"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.attn.wv"), rng.normal_tensor(vec![d, d], w_std));
            params.insert(&format!("{p}.attn.bv"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.attn.wo"), rng.normal_tensor(vec![d, d], resid_std));
            params.insert(&format!("{p}.attn.bo"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.ln2.g"), Tensor::full(vec![d], 1.0));
            params.insert(&format!("{p}.ln2.b"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.mlp.w1"), rng.normal_tensor(vec![d, config.d_ff()], w_std));
            params.insert(&format!("{p}.mlp.b1"), Tensor::zeros(vec![config.d_ff()]));
            params.insert(&format!("{p}.mlp.w2"), rng.normal_tensor(vec![config.d_ff(), d], resid_std));
            params.insert(&format!("{p}.mlp.b2"), Tensor::zeros(vec![d]));
        }
        params.insert("ln_f.g", Tensor::full(vec![d], 1.0));
        params.insert("ln_f.b", Tensor::zeros(vec![d]));
        if !config.tie_embeddings {
            params.insert("lm_head", rng.normal_tensor(vec![v, d], w_std));
        }
        Ok(Self { config, params, role: ModelRole::Base })
    }

    /// Deep copy used as the frozen KL reference during RL.
    pub fn clone_frozen_reference(&self) -> PolicyModel {
        self.clone()
    }

    fn check_seq(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len, max: self.config.max_seq_len });
        }
        Ok(())
    }

    /// Logits for every position of a token-forced sequence. Row i predicts
    /// the token at position i+1.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        self.check_seq(tokens.len())?;
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.params, &self.config, false);
        let fwd = forward_tokens(&mut g, &bound, &self.config, tokens, None);
        Ok(g.value(fwd.logits).clone())
    }

    /// Token-force `prompt ++ completion` and return (a) logits aligned so
    /// row i predicts completion token i, and (b) the residual-stream trace
    /// at `layer` over the completion positions.
    pub fn forward_with_activations(
        &self,
        prompt: &[u32],
        completion: &[u32],
        layer: usize,
    ) -> Result<(Tensor<f32>, ActivationTrace)> {
        let traces = self.forward_with_activations_multi(prompt, completion, &[layer])?;
        let (logits, mut traces) = traces;
        Ok((logits, traces.pop().expect("one layer requested")))
    }

    /// Same as `forward_with_activations` but captures several layers in one
    /// pass. Layers are returned in the order requested.
    pub fn forward_with_activations_multi(
        &self,
        prompt: &[u32],
        completion: &[u32],
        layers: &[usize],
    ) -> Result<(Tensor<f32>, Vec<ActivationTrace>)> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must be non-empty".into()));
        }
        for &l in layers {
            if l >= self.config.n_layers {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} out of range (n_layers {})",
                    self.config.n_layers
                )));
            }
        }
        self.check_seq(prompt.len() + completion.len())?;
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(completion);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.params, &self.config, false);
        let fwd = forward_tokens(&mut g, &bound, &self.config, &seq, None);
        let p = prompt.len();
        let t = completion.len();
        let logits = rows_of(g.value(fwd.logits), p.saturating_sub(1), t);
        let traces = layers
            .iter()
            .map(|&l| ActivationTrace {
                layer: l,
                vectors: rows_of(g.value(fwd.residuals[l]), p, t),
                token_ids: completion.to_vec(),
            })
            .collect();
        Ok((logits, traces))
    }

    /// Forward with the residual stream at selected layers replaced by the
    /// given (t_completion, d) tensors, then read the trace at `read_layer`.
    /// Patch rows are applied at completion positions only.
    pub fn forward_patched(
        &self,
        prompt: &[u32],
        completion: &[u32],
        patches: &[Option<Tensor<f32>>],
        read_layer: usize,
    ) -> Result<ActivationTrace> {
        if patches.len() != self.config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "patch list has {} entries, model has {} layers",
                patches.len(),
                self.config.n_layers
            )));
        }
        self.check_seq(prompt.len() + completion.len())?;
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(completion);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.params, &self.config, false);
        let patch = PatchSpec { start_row: prompt.len(), layers: patches };
        let fwd = forward_tokens(&mut g, &bound, &self.config, &seq, Some(&patch));
        Ok(ActivationTrace {
            layer: read_layer,
            vectors: rows_of(g.value(fwd.residuals[read_layer]), prompt.len(), completion.len()),
            token_ids: completion.to_vec(),
        })
    }

    /// Mean over completion positions of the exact categorical KL from this
    /// model's next-token distribution to `base`'s, computed from full logits.
    pub fn kl_to_reference(&self, base: &PolicyModel, prompt: &[u32], completion: &[u32]) -> Result<f64> {
        if self.config.vocab_size != base.config.vocab_size {
            return Err(Error::InvalidConfig("kl_to_reference: vocab mismatch".into()));
        }
        if completion.is_empty() {
            return Ok(0.0);
        }
        let (lp, _) = self.forward_with_activations(prompt, completion, 0)?;
        let (lq, _) = base.forward_with_activations(prompt, completion, 0)?;
        let mut total = 0.0;
        for r in 0..lp.rows() {
            total += kl_categorical_logits(lp.row(r), lq.row(r));
        }
        Ok(total / lp.rows() as f64)
    }
}

/// Exact KL(p || q) between two categoricals given unnormalized logits.
pub fn kl_categorical_logits(logits_p: &[f32], logits_q: &[f32]) -> f64 {
    let lp = log_softmax_f64(logits_p);
    let lq = log_softmax_f64(logits_q);
    lp.iter().zip(lq.iter()).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&x| (x as f64 - mx).exp()).sum();
    let lz = z.ln() + mx;
    logits.iter().map(|&x| x as f64 - lz).collect()
}

fn rows_of(t: &Tensor<f32>, start: usize, count: usize) -> Tensor<f32> {
    let n = t.cols();
    let mut out = Tensor::zeros(vec![count, n]);
    for r in 0..count {
        out.data_mut()[r * n..(r + 1) * n].copy_from_slice(t.row(start + r));
    }
    out
}

/// Residual-stream overrides for activation patching.
pub struct PatchSpec<'a, T: Real> {
    /// First row (sequence position) the patch tensors correspond to.
    pub start_row: usize,
    /// One optional (t, d) override per layer.
    pub layers: &'a [Option<Tensor<T>>],
}

pub struct BoundModel {
    tok_emb: NodeId,
    pos_emb: NodeId,
    blocks: Vec<BoundBlock>,
    ln_f: (NodeId, NodeId),
    lm_head: Option<NodeId>,
}

struct BoundBlock {
    ln1: (NodeId, NodeId),
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2: (NodeId, NodeId),
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Bind model parameters into a graph. With `trainable = false` the values
/// enter as constants and backward never visits them.
pub fn bind_params<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    trainable: bool,
) -> BoundModel {
    let mut bind = |name: &str| -> NodeId {
        if trainable {
            g.param(store, name)
        } else {
            g.input(store.get(name).clone())
        }
    };
    let tok_emb = bind("tok_emb");
    let pos_emb = bind("pos_emb");
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = format!("blocks.{i}");
        blocks.push(BoundBlock {
            ln1: (bind(&format!("{p}.ln1.g")), bind(&format!("{p}.ln1.b"))),
            wq: bind(&format!("{p}.attn.wq")),
            bq: bind(&format!("{p}.attn.bq")),
            wk: bind(&format!("{p}.attn.wk")),
            bk: bind(&format!("{p}.attn.bk")),
            wv: bind(&format!("{p}.attn.wv")),
            bv: bind(&format!("{p}.attn.bv")),
            wo: bind(&format!("{p}.attn.wo")),
            bo: bind(&format!("{p}.attn.bo")),
            ln2: (bind(&format!("{p}.ln2.g")), bind(&format!("{p}.ln2.b"))),
            w1: bind(&format!("{p}.mlp.w1")),
            b1: bind(&format!("{p}.mlp.b1")),
            w2: bind(&format!("{p}.mlp.w2")),
            b2: bind(&format!("{p}.mlp.b2")),
        });
    }
    let ln_f = (bind("ln_f.g"), bind("ln_f.b"));
    let lm_head = if cfg.tie_embeddings { None } else { Some(bind("lm_head")) };
    BoundModel { tok_emb, pos_emb, blocks, ln_f, lm_head }
}

pub struct ForwardNodes {
    /// Residual stream after each block, (t, d) per layer.
    pub residuals: Vec<NodeId>,
    /// (t, vocab) logits; row i predicts the token at position i+1.
    pub logits: NodeId,
}

/// Build the forward computation for one token-forced sequence.
pub fn forward_tokens<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
    patch: Option<&PatchSpec<'_, T>>,
) -> ForwardNodes {
    let t = tokens.len();
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let tok = g.gather_rows(bound.tok_emb, ids);
    let pos = g.gather_rows(bound.pos_emb, (0..t).collect());
    let mut x = g.add(tok, pos);
    let eps = T::from_f64_c(LN_EPS);
    let dh = cfg.head_dim();
    let scale = T::from_f64_c(1.0 / (dh as f64).sqrt());
    let mut residuals = Vec::with_capacity(cfg.n_layers);
    for (layer, blk) in bound.blocks.iter().enumerate() {
        let h = g.layer_norm(x, blk.ln1.0, blk.ln1.1, eps);
        let q = g.matmul(h, blk.wq);
        let q = g.add_bias(q, blk.bq);
        let k = g.matmul(h, blk.wk);
        let k = g.add_bias(k, blk.bk);
        let v = g.matmul(h, blk.wv);
        let v = g.add_bias(v, blk.bv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows_masked(scores, Mask::Causal);
            heads.push(g.matmul(attn, vh));
        }
        let ctx = g.concat_cols(&heads);
        let proj = g.matmul(ctx, blk.wo);
        let proj = g.add_bias(proj, blk.bo);
        x = g.add(x, proj);
        let h2 = g.layer_norm(x, blk.ln2.0, blk.ln2.1, eps);
        let m = g.matmul(h2, blk.w1);
        let m = g.add_bias(m, blk.b1);
        let m = g.gelu(m);
        let m = g.matmul(m, blk.w2);
        let m = g.add_bias(m, blk.b2);
        x = g.add(x, m);
        if let Some(p) = patch {
            if let Some(override_rows) = &p.layers[layer] {
                x = apply_patch(g, x, override_rows, p.start_row);
            }
        }
        residuals.push(x);
    }
    let xf = g.layer_norm(x, bound.ln_f.0, bound.ln_f.1, eps);
    let logits = match bound.lm_head {
        Some(head) => g.matmul_bt(xf, head),
        None => g.matmul_bt(xf, bound.tok_emb),
    };
    ForwardNodes { residuals, logits }
}

fn apply_patch<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    override_rows: &Tensor<T>,
    start_row: usize,
) -> NodeId {
    let cur = g.value(x).clone();
    let (m, n) = (cur.rows(), cur.cols());
    assert_eq!(override_rows.cols(), n, "patch width mismatch");
    let mut patched = cur;
    for r in 0..override_rows.rows() {
        let dst = start_row + r;
        assert!(dst < m, "patch rows exceed sequence");
        patched.data_mut()[dst * n..(dst + 1) * n].copy_from_slice(override_rows.row(r));
    }
    g.input(patched)
}
