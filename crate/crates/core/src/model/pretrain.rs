//! Supervised pretraining on (prompt, completion) pairs — the stand-in for a
//! base model that already follows the task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::transformer::{bind_params, forward_tokens, PolicyModel};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::rng::RngState;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the corpus held out for the loss-decrease check.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.1
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 16, lr: 1e-3, holdout_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training cross-entropy (nats/token) per epoch.
    pub train_losses: Vec<f64>,
    /// Held-out cross-entropy per epoch (empty if holdout_fraction is 0).
    pub holdout_losses: Vec<f64>,
}

/// Cross-entropy training over completion tokens given prompts. Loss is the
/// pooled mean over all completion tokens in a batch; one Adam step per batch.
pub fn supervised_pretrain(
    model: &mut PolicyModel,
    corpus: &[(Vec<u32>, Vec<u32>)],
    cfg: &PretrainConfig,
    rng: &mut RngState,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig("pretrain epochs and batch_size must be > 0".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    let n_hold = ((cfg.holdout_fraction * corpus.len() as f64).round() as usize).min(corpus.len() - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);

    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut holdout_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_order: Vec<usize> = train_idx.to_vec();
    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut epoch_order);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in epoch_order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &model.params, &model.config, true);
            let mut picked: Vec<NodeId> = Vec::new();
            let mut n_tokens = 0usize;
            for &i in batch {
                let (prompt, completion) = &corpus[i];
                if completion.is_empty() {
                    continue;
                }
                let mut seq = prompt.clone();
                seq.extend_from_slice(completion);
                let fwd = forward_tokens(&mut g, &bound, &model.config, &seq, None);
                let rows: Vec<usize> = (prompt.len() - 1..seq.len() - 1).collect();
                let targets: Vec<usize> = completion.iter().map(|&t| t as usize).collect();
                let sel = g.gather_rows(fwd.logits, rows);
                let ls = g.log_softmax_rows(sel);
                let lp = g.pick_per_row(ls, targets);
                picked.push(g.sum_all(lp));
                n_tokens += completion.len();
            }
            if n_tokens == 0 {
                continue;
            }
            let mut total = picked[0];
            for &p in &picked[1..] {
                total = g.add(total, p);
            }
            let loss = g.scale(total, -1.0 / n_tokens as f32);
            let loss_v = g.value(loss).item() as f64;
            if !loss_v.is_finite() {
                return Err(Error::Diverged(format!("pretraining loss became {loss_v}")));
            }
            g.backward_into(loss, &mut model.params)?;
            model.params.adam_step(cfg.lr)?;
            epoch_loss += loss_v * n_tokens as f64;
            epoch_tokens += n_tokens;
        }
        train_losses.push(epoch_loss / epoch_tokens.max(1) as f64);
        if !hold_idx.is_empty() {
            holdout_losses.push(eval_ce(model, corpus, hold_idx)?);
        }
    }
    Ok(PretrainReport { train_losses, holdout_losses })
}

/// Mean cross-entropy (nats/token) of the model on the given corpus indices.
pub fn eval_ce(model: &PolicyModel, corpus: &[(Vec<u32>, Vec<u32>)], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in idx {
        let (prompt, completion) = &corpus[i];
        if completion.is_empty() {
            continue;
        }
        let (logits, _) = model.forward_with_activations(prompt, completion, 0)?;
        for (r, &tok) in completion.iter().enumerate() {
            let row = logits.row(r);
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            total -= row[tok as usize] as f64 - (z.ln() + mx);
        }
        count += completion.len();
    }
    if count == 0 {
        return Err(Error::EmptyInput("no completion tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}
