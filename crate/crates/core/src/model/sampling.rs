//! Autoregressive sampling with per-layer key/value caches.
//!
//! The decoder reuses the exact kernel routines the graph forward is built
//! from, with identical accumulation order, so the activations and log-probs
//! it produces are bit-identical to a token-forced graph forward of the same
//! sequence. GRPO's on-policy ratio-of-one identity depends on this.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::transformer::{ActivationTrace, PolicyModel, LN_EPS};
use crate::numerics::kernels::{axpy, dot, vecmat_acc};
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f32,
    pub max_new_tokens: usize,
    /// Token that terminates a completion. When sampled it is kept as the
    /// final completion token (the stop decision is part of the policy).
    pub stop_token: Option<u32>,
    /// Zero-temperature limit: argmax decoding (lowest id wins ties).
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 1.0, max_new_tokens: 40, stop_token: None, greedy: false }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("sampling temperature must be > 0".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be > 0".into()));
        }
        Ok(())
    }
}

/// One sampled completion with the policy's own (untempered) log-probs and
/// residual traces at the requested layers.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f32>,
    pub traces: Vec<ActivationTrace>,
}

#[derive(Clone, Copy)]
struct BlockRefs<'m> {
    ln1_g: &'m Tensor<f32>,
    ln1_b: &'m Tensor<f32>,
    wq: &'m Tensor<f32>,
    bq: &'m Tensor<f32>,
    wk: &'m Tensor<f32>,
    bk: &'m Tensor<f32>,
    wv: &'m Tensor<f32>,
    bv: &'m Tensor<f32>,
    wo: &'m Tensor<f32>,
    bo: &'m Tensor<f32>,
    ln2_g: &'m Tensor<f32>,
    ln2_b: &'m Tensor<f32>,
    w1: &'m Tensor<f32>,
    b1: &'m Tensor<f32>,
    w2: &'m Tensor<f32>,
    b2: &'m Tensor<f32>,
}

/// Incremental decoder state over a growing sequence.
#[derive(Clone)]
pub struct Decoder<'m> {
    model: &'m PolicyModel,
    blocks: Vec<BlockRefs<'m>>,
    ln_f_g: &'m Tensor<f32>,
    ln_f_b: &'m Tensor<f32>,
    emb_out: &'m Tensor<f32>,
    /// Per layer: cached key/value rows, one d-wide row per position.
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    pos: usize,
    /// Logits produced by the most recently fed token.
    pub logits: Vec<f32>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m PolicyModel) -> Self {
        let n = model.config.n_layers;
        let params = &model.params;
        let blocks = (0..n)
            .map(|i| {
                let p = format!("blocks.{i}");
                BlockRefs {
                    ln1_g: params.get(&format!("{p}.ln1.g")),
                    ln1_b: params.get(&format!("{p}.ln1.b")),
                    wq: params.get(&format!("{p}.attn.wq")),
                    bq: params.get(&format!("{p}.attn.bq")),
                    wk: params.get(&format!("{p}.attn.wk")),
                    bk: params.get(&format!("{p}.attn.bk")),
                    wv: params.get(&format!("{p}.attn.wv")),
                    bv: params.get(&format!("{p}.attn.bv")),
                    wo: params.get(&format!("{p}.attn.wo")),
                    bo: params.get(&format!("{p}.attn.bo")),
                    ln2_g: params.get(&format!("{p}.ln2.g")),
                    ln2_b: params.get(&format!("{p}.ln2.b")),
                    w1: params.get(&format!("{p}.mlp.w1")),
                    b1: params.get(&format!("{p}.mlp.b1")),
                    w2: params.get(&format!("{p}.mlp.w2")),
                    b2: params.get(&format!("{p}.mlp.b2")),
                }
            })
            .collect();
        Self {
            model,
            blocks,
            ln_f_g: params.get("ln_f.g"),
            ln_f_b: params.get("ln_f.b"),
            emb_out: if model.config.tie_embeddings {
                params.get("tok_emb")
            } else {
                params.get("lm_head")
            },
            k_cache: vec![Vec::new(); n],
            v_cache: vec![Vec::new(); n],
            pos: 0,
            logits: Vec::new(),
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Feed one token; returns the residual-stream row after every block.
    pub fn feed(&mut self, token: u32) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.model.config;
        if self.pos >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.pos + 1, max: cfg.max_seq_len });
        }
        debug_assert!((token as usize) < cfg.vocab_size);
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let tok_row = self.model.params.get("tok_emb").row(token as usize);
        let pos_row = self.model.params.get("pos_emb").row(self.pos);
        let mut x: Vec<f32> = tok_row.iter().zip(pos_row).map(|(&a, &b)| a + b).collect();
        let mut residuals = Vec::with_capacity(cfg.n_layers);
        for (layer, blk) in self.blocks.iter().enumerate() {
            let h = ln_row(&x, blk.ln1_g.data(), blk.ln1_b.data());
            let q = linear_row(&h, blk.wq, blk.bq);
            let k = linear_row(&h, blk.wk, blk.bk);
            let v = linear_row(&h, blk.wv, blk.bv);
            self.k_cache[layer].extend_from_slice(&k);
            self.v_cache[layer].extend_from_slice(&v);
            let n_pos = self.pos + 1;
            let mut ctx = vec![0.0f32; d];
            for hd in 0..cfg.n_heads {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                // Scores against every cached key, then a single-pass softmax
                // (same operation order as the masked-softmax graph op).
                let mut scores = Vec::with_capacity(n_pos);
                for j in 0..n_pos {
                    let krow = &self.k_cache[layer][j * d + off..j * d + off + dh];
                    scores.push(dot(qh, krow) * scale);
                }
                let mut mx = f32::NEG_INFINITY;
                for &s in &scores {
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = 0.0f32;
                for s in scores.iter_mut() {
                    let e = (*s - mx).exp();
                    *s = e;
                    z += e;
                }
                for s in scores.iter_mut() {
                    *s /= z;
                }
                let ctx_h = &mut ctx[off..off + dh];
                for (j, &a) in scores.iter().enumerate() {
                    let vrow = &self.v_cache[layer][j * d + off..j * d + off + dh];
                    axpy(a, vrow, ctx_h);
                }
            }
            let proj = linear_row(&ctx, blk.wo, blk.bo);
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            let h2 = ln_row(&x, blk.ln2_g.data(), blk.ln2_b.data());
            let mut m = linear_row(&h2, blk.w1, blk.b1);
            for v in m.iter_mut() {
                *v = gelu_f32(*v);
            }
            let m = linear_row(&m, blk.w2, blk.b2);
            for (xv, &mv) in x.iter_mut().zip(&m) {
                *xv += mv;
            }
            residuals.push(x.clone());
        }
        let xf = ln_row(&x, self.ln_f_g.data(), self.ln_f_b.data());
        let mut logits = vec![0.0f32; cfg.vocab_size];
        for (vcb, l) in logits.iter_mut().enumerate() {
            *l = dot(&xf, self.emb_out.row(vcb));
        }
        self.logits = logits;
        self.pos += 1;
        Ok(residuals)
    }

    pub fn feed_all(&mut self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            self.feed(t)?;
        }
        Ok(())
    }
}

fn ln_row(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let n = x.len();
    let nf = n as f32;
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= nf;
    let mut var = 0.0f32;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= nf;
    let istd = 1.0 / (var + LN_EPS as f32).sqrt();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        out.push(((x[j] - mean) * istd) * gain[j] + bias[j]);
    }
    out
}

fn linear_row(x: &[f32], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (k, n) = (w.rows(), w.cols());
    let mut y = vec![0.0f32; n];
    vecmat_acc(x, w.data(), &mut y, k, n);
    for (yv, &bv) in y.iter_mut().zip(b.data()) {
        *yv += bv;
    }
    y
}

fn gelu_f32(x: f32) -> f32 {
    let c = 0.7978845608028654f32;
    let a = 0.044715f32;
    let inner = c * (x + a * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

/// Log-softmax lookup reproducing the graph op's exact f32 arithmetic.
fn logprob_of(logits: &[f32], token: usize) -> f32 {
    let mut mx = f32::NEG_INFINITY;
    for &v in logits {
        if v > mx {
            mx = v;
        }
    }
    let mut z = 0.0f32;
    for &v in logits {
        z += (v - mx).exp();
    }
    let lz = z.ln() + mx;
    logits[token] - lz
}

fn choose_token(logits: &[f32], cfg: &SamplingConfig, rng: &mut RngState) -> usize {
    if cfg.greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let inv_t = 1.0 / cfg.temperature as f64;
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let probs: Vec<f32> =
        logits.iter().map(|&v| (((v as f64 - mx) * inv_t).exp()) as f32).collect();
    rng.categorical(&probs)
}

/// Sample one completion starting from a prefilled decoder (prompt already
/// fed). `capture_layers` selects which residual layers to trace.
pub fn sample_one(
    prefill: &Decoder<'_>,
    cfg: &SamplingConfig,
    capture_layers: &[usize],
    rng: &mut RngState,
) -> Result<Sampled> {
    cfg.validate()?;
    let mut dec = prefill.clone();
    let d = dec.model.config.d_model;
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); capture_layers.len()];
    for _ in 0..cfg.max_new_tokens {
        if dec.pos() >= dec.model.config.max_seq_len {
            break;
        }
        let tok = choose_token(&dec.logits, cfg, rng);
        logprobs.push(logprob_of(&dec.logits, tok));
        let residuals = dec.feed(tok as u32)?;
        for (slot, &layer) in rows.iter_mut().zip(capture_layers) {
            slot.extend_from_slice(&residuals[layer]);
        }
        tokens.push(tok as u32);
        if Some(tok as u32) == cfg.stop_token {
            break;
        }
    }
    let traces = capture_layers
        .iter()
        .zip(rows)
        .map(|(&layer, data)| ActivationTrace {
            layer,
            vectors: Tensor::from_vec(vec![tokens.len(), d], data).expect("trace shape"),
            token_ids: tokens.clone(),
        })
        .collect();
    Ok(Sampled { tokens, logprobs, traces })
}

/// Sample a group of completions for one prompt. Each group member draws from
/// an independent fork of `rng`, so results do not depend on evaluation order.
pub fn sample_completions(
    model: &PolicyModel,
    prompt: &[u32],
    cfg: &SamplingConfig,
    group: usize,
    capture_layers: &[usize],
    rng: &RngState,
) -> Result<Vec<Sampled>> {
    if group < 2 {
        return Err(Error::InvalidArgument("group size must be >= 2".into()));
    }
    let pre = prefill(model, prompt)?;
    (0..group)
        .map(|j| sample_one(&pre, cfg, capture_layers, &mut rng.fork(j as u64)))
        .collect()
}

/// Feed a prompt through a fresh decoder.
pub fn prefill<'m>(model: &'m PolicyModel, prompt: &[u32]) -> Result<Decoder<'m>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be non-empty".into()));
    }
    let mut dec = Decoder::new(model);
    dec.feed_all(prompt)?;
    Ok(dec)
}
