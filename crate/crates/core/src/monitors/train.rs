//! Probe training regimes.
//!
//! Tokenwise: every token is an IID sample under binary cross-entropy (40
//! epochs, batch 16). Maxpool: one sample per generation, loss on the mean of
//! its top-k sigmoid scores (80 epochs). Ensemble: joint BCE over linear
//! probes plus a weight-orthogonality penalty.

use crate::error::{Error, Result};
use crate::model::transformer::ActivationTrace;
use crate::monitors::probe::{build_probe_logits, Probe, ProbeArch, ProbeConfig, Provenance, Regime};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParameterStore;
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 16, lr: 1e-3 }
    }
}

impl ProbeTrainConfig {
    pub fn maxpool_default() -> Self {
        Self { epochs: 80, batch_size: 16, lr: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeTrainStats {
    pub epoch_losses: Vec<f64>,
}

impl ProbeTrainStats {
    pub fn initial(&self) -> f64 {
        *self.epoch_losses.first().unwrap_or(&f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&f64::NAN)
    }
}

fn check_dataset(data: &[(ActivationTrace, bool)], input_dim: usize) -> Result<()> {
    let mut has_pos = false;
    let mut has_neg = false;
    let mut any_tokens = false;
    for (trace, label) in data {
        if !trace.is_empty() {
            any_tokens = true;
            if trace.vectors.cols() != input_dim {
                return Err(Error::ShapeMismatch(format!(
                    "trace dim {} vs probe input_dim {input_dim}",
                    trace.vectors.cols()
                )));
            }
            if *label {
                has_pos = true;
            } else {
                has_neg = true;
            }
        }
    }
    if !any_tokens {
        return Err(Error::EmptyInput("probe dataset has no tokens".into()));
    }
    if !(has_pos && has_neg) {
        return Err(Error::InvalidArgument("probe training needs both labels present".into()));
    }
    Ok(())
}

/// Tokenwise IID training. Linear and MLP probes shuffle individual tokens
/// into batches; the attention probe needs its sequence context, so batches
/// are whole traces with the loss pooled over their tokens.
pub fn train_probe_tokenwise(
    config: ProbeConfig,
    data: &[(ActivationTrace, bool)],
    hp: &ProbeTrainConfig,
    rng: &mut RngState,
) -> Result<(Probe, ProbeTrainStats)> {
    check_dataset(data, config.input_dim)?;
    let mut probe = Probe::new(config, rng)?;
    probe.provenance = Provenance::unversioned(Regime::Tokenwise);
    let stats = match probe.config.arch {
        ProbeArch::Attention { .. } => train_trace_batched(&mut probe, data, hp, rng)?,
        _ => train_token_batched(&mut probe, data, hp, rng)?,
    };
    Ok((probe, stats))
}

fn train_token_batched(
    probe: &mut Probe,
    data: &[(ActivationTrace, bool)],
    hp: &ProbeTrainConfig,
    rng: &mut RngState,
) -> Result<ProbeTrainStats> {
    let d = probe.config.input_dim;
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (i, (trace, _)) in data.iter().enumerate() {
        for j in 0..trace.len() {
            samples.push((i, j));
        }
    }
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for _ in 0..hp.epochs {
        rng.shuffle(&mut samples);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in samples.chunks(hp.batch_size) {
            let mut x = Tensor::zeros(vec![batch.len(), d]);
            let mut targets = Vec::with_capacity(batch.len());
            for (r, &(i, j)) in batch.iter().enumerate() {
                x.data_mut()[r * d..(r + 1) * d].copy_from_slice(data[i].0.vectors.row(j));
                targets.push(if data[i].1 { 1.0 } else { 0.0 });
            }
            let mut g = Graph::new();
            let xin = g.input(x);
            let logits = build_probe_logits(&mut g, &probe.params, &probe.config, xin, true);
            let loss = g.bce_with_logits_mean(logits, targets);
            loss_sum += g.value(loss).item() as f64;
            batches += 1;
            g.backward_into(loss, &mut probe.params)?;
            probe.params.adam_step(hp.lr)?;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok(ProbeTrainStats { epoch_losses })
}

fn train_trace_batched(
    probe: &mut Probe,
    data: &[(ActivationTrace, bool)],
    hp: &ProbeTrainConfig,
    rng: &mut RngState,
) -> Result<ProbeTrainStats> {
    let mut order: Vec<usize> = (0..data.len()).filter(|&i| !data[i].0.is_empty()).collect();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for _ in 0..hp.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(hp.batch_size) {
            let mut g = Graph::new();
            let mut weighted: Vec<(NodeId, usize)> = Vec::with_capacity(batch.len());
            let mut total_tokens = 0usize;
            for &i in batch {
                let (trace, label) = &data[i];
                let x = g.input(trace.vectors.clone());
                let logits = build_probe_logits(&mut g, &probe.params, &probe.config, x, true);
                let targets = vec![if *label { 1.0 } else { 0.0 }; trace.len()];
                let bce = g.bce_with_logits_mean(logits, targets);
                weighted.push((bce, trace.len()));
                total_tokens += trace.len();
            }
            // Pooled token mean across the batch.
            let mut total: Option<NodeId> = None;
            for (node, t) in weighted {
                let scaled = g.scale(node, t as f32 / total_tokens as f32);
                total = Some(match total {
                    Some(acc) => g.add(acc, scaled),
                    None => scaled,
                });
            }
            let loss = total.expect("non-empty batch");
            loss_sum += g.value(loss).item() as f64;
            batches += 1;
            g.backward_into(loss, &mut probe.params)?;
            probe.params.adam_step(hp.lr)?;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok(ProbeTrainStats { epoch_losses })
}

/// Maxpool training: per generation, binary cross-entropy on the mean of its
/// top-k token scores (k clipped to the trace length); one IID sample per
/// generation.
pub fn train_probe_maxpool(
    config: ProbeConfig,
    data: &[(ActivationTrace, bool)],
    k: usize,
    hp: &ProbeTrainConfig,
    rng: &mut RngState,
) -> Result<(Probe, ProbeTrainStats)> {
    if k == 0 {
        return Err(Error::InvalidArgument("maxpool k must be >= 1".into()));
    }
    check_dataset(data, config.input_dim)?;
    let mut probe = Probe::new(config, rng)?;
    probe.provenance = Provenance::unversioned(Regime::Maxpool { k });
    let mut order: Vec<usize> = (0..data.len()).filter(|&i| !data[i].0.is_empty()).collect();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for _ in 0..hp.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(hp.batch_size) {
            let mut g = Graph::new();
            let mut per_trace: Vec<NodeId> = Vec::with_capacity(batch.len());
            for &i in batch {
                let (trace, label) = &data[i];
                let x = g.input(trace.vectors.clone());
                let logits = build_probe_logits(&mut g, &probe.params, &probe.config, x, true);
                let scores = g.sigmoid(logits);
                let idx = top_k_indices(g.value(logits).data(), k.min(trace.len()));
                let top = g.gather_rows(scores, idx);
                let mean = g.mean_all(top);
                // BCE on a probability; clamp wards off saturated sigmoids.
                let mean = g.clamp_const(mean, 1e-7, 1.0 - 1e-7);
                let nll = if *label {
                    let l = g.ln(mean);
                    g.scale(l, -1.0)
                } else {
                    let neg = g.scale(mean, -1.0);
                    let one_minus = g.add_scalar(neg, 1.0);
                    let l = g.ln(one_minus);
                    g.scale(l, -1.0)
                };
                per_trace.push(nll);
            }
            let mut total = per_trace[0];
            for &n in &per_trace[1..] {
                total = g.add(total, n);
            }
            let loss = g.scale(total, 1.0 / per_trace.len() as f32);
            loss_sum += g.value(loss).item() as f64;
            batches += 1;
            g.backward_into(loss, &mut probe.params)?;
            probe.params.adam_step(hp.lr)?;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok((probe, ProbeTrainStats { epoch_losses }))
}

fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Joint training of `n_probes` linear probes: mean BCE over probes plus
/// `ortho_weight` times the mean absolute off-diagonal cosine similarity of
/// the normalized weight vectors.
pub fn train_ensemble(
    n_probes: usize,
    data: &[(ActivationTrace, bool)],
    ortho_weight: f64,
    hp: &ProbeTrainConfig,
    rng: &mut RngState,
) -> Result<(Vec<Probe>, ProbeTrainStats)> {
    if n_probes < 2 {
        return Err(Error::InvalidArgument("ensemble needs at least 2 probes".into()));
    }
    let input_dim = data
        .iter()
        .find(|(t, _)| !t.is_empty())
        .map(|(t, _)| t.vectors.cols())
        .ok_or_else(|| Error::EmptyInput("ensemble dataset has no tokens".into()))?;
    check_dataset(data, input_dim)?;
    let mut params = ParameterStore::<f32>::new();
    params.insert("w", rng.normal_tensor(vec![input_dim, n_probes], 0.01));
    params.insert("b", Tensor::zeros(vec![n_probes]));

    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (i, (trace, _)) in data.iter().enumerate() {
        for j in 0..trace.len() {
            samples.push((i, j));
        }
    }
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for _ in 0..hp.epochs {
        rng.shuffle(&mut samples);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in samples.chunks(hp.batch_size) {
            let mut x = Tensor::zeros(vec![batch.len(), input_dim]);
            let mut targets = Vec::with_capacity(batch.len() * n_probes);
            for (r, &(i, j)) in batch.iter().enumerate() {
                x.data_mut()[r * input_dim..(r + 1) * input_dim]
                    .copy_from_slice(data[i].0.vectors.row(j));
                let y = if data[i].1 { 1.0 } else { 0.0 };
                targets.extend(std::iter::repeat(y).take(n_probes));
            }
            let mut g = Graph::new();
            let xin = g.input(x);
            let w = g.param(&params, "w");
            let b = g.param(&params, "b");
            let z = g.matmul(xin, w);
            let z = g.add_bias(z, b);
            let l_pred = g.bce_with_logits_mean(z, targets);
            let l_ortho = ortho_loss_node(&mut g, w, n_probes);
            let penalty = g.scale(l_ortho, ortho_weight as f32);
            let loss = g.add(l_pred, penalty);
            loss_sum += g.value(loss).item() as f64;
            batches += 1;
            g.backward_into(loss, &mut params)?;
            params.adam_step(hp.lr)?;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }

    let w = params.get("w").clone();
    let b = params.get("b").clone();
    let probes = (0..n_probes)
        .map(|j| {
            let mut p = ParameterStore::new();
            let col: Vec<f32> = (0..input_dim).map(|r| w.at(r, j)).collect();
            p.insert("w", Tensor::from_vec(vec![input_dim, 1], col).unwrap());
            p.insert("b", Tensor::from_vec(vec![1], vec![b.data()[j]]).unwrap());
            Probe {
                config: ProbeConfig { arch: ProbeArch::Linear, layer: 0, input_dim },
                params: p,
                provenance: Provenance::unversioned(Regime::Ensemble { member: j, of: n_probes }),
            }
        })
        .collect();
    Ok((probes, ProbeTrainStats { epoch_losses }))
}

/// Mean absolute off-diagonal cosine similarity as a graph node, from the
/// (d, n) stacked weight matrix.
fn ortho_loss_node(g: &mut Graph<f32>, w: NodeId, n_probes: usize) -> NodeId {
    let mut unit: Vec<NodeId> = Vec::with_capacity(n_probes);
    for j in 0..n_probes {
        let wj = g.slice_cols(w, j, 1);
        let sq = g.mul(wj, wj);
        let ssq = g.sum_all(sq);
        let ssq = g.add_scalar(ssq, 1e-12);
        let inv_norm = g.pow_const(ssq, -0.5);
        unit.push(g.mul_scalar_node(wj, inv_norm));
    }
    let mut total: Option<NodeId> = None;
    for j in 0..n_probes {
        for k2 in (j + 1)..n_probes {
            let prod = g.mul(unit[j], unit[k2]);
            let cos = g.sum_all(prod);
            let a = g.abs(cos);
            total = Some(match total {
                Some(t) => g.add(t, a),
                None => a,
            });
        }
    }
    let total = total.expect("n_probes >= 2");
    let pairs = (n_probes * (n_probes - 1)) as f32;
    g.scale(total, 2.0 / pairs)
}

/// Mean absolute off-diagonal cosine similarity of trained probe weights,
/// computed in f64 (diagnostic counterpart of the training penalty).
pub fn ensemble_ortho_stat(probes: &[Probe]) -> Result<f64> {
    if probes.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 probes".into()));
    }
    let ws: Vec<Vec<f64>> = probes
        .iter()
        .map(|p| {
            let w = p.params.try_get("w").ok_or_else(|| {
                Error::InvalidArgument("ensemble stat needs linear probes".into())
            })?;
            Ok(w.data().iter().map(|&x| x as f64).collect())
        })
        .collect::<Result<_>>()?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for j in 0..ws.len() {
        for k in (j + 1)..ws.len() {
            let dot: f64 = ws[j].iter().zip(&ws[k]).map(|(a, b)| a * b).sum();
            total += (dot / (norm(&ws[j]) * norm(&ws[k]))).abs();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitors::aggregate::{aggregate, Aggregation};
    use crate::monitors::calibrate::threshold_from_scores;

    fn gauss_trace(rng: &mut RngState, t: usize, d: usize, shift: &[f32]) -> ActivationTrace {
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t {
            for (j, s) in shift.iter().enumerate().take(d) {
                let _ = j;
                data.push(rng.normal_f32() + s);
            }
        }
        ActivationTrace {
            layer: 0,
            vectors: Tensor::from_vec(vec![t, d], data).unwrap(),
            token_ids: vec![0; t],
        }
    }

    fn separable_dataset(
        rng: &mut RngState,
        n_per_class: usize,
        t: usize,
        d: usize,
        dist: f32,
    ) -> Vec<(ActivationTrace, bool)> {
        let mut shift_pos = vec![0.0f32; d];
        shift_pos[0] = dist / 2.0;
        let mut shift_neg = vec![0.0f32; d];
        shift_neg[0] = -dist / 2.0;
        let mut out = Vec::new();
        for _ in 0..n_per_class {
            out.push((gauss_trace(rng, t, d, &shift_neg), false));
            out.push((gauss_trace(rng, t, d, &shift_pos), true));
        }
        out
    }

    fn completion_scores(
        probe: &Probe,
        data: &[(ActivationTrace, bool)],
        g: Aggregation,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut safe = Vec::new();
        let mut unsafe_ = Vec::new();
        for (trace, label) in data {
            let s = aggregate(&probe.scores_f64(trace).unwrap(), g).unwrap();
            if *label {
                unsafe_.push(s);
            } else {
                safe.push(s);
            }
        }
        (safe, unsafe_)
    }

    fn recall_at(safe: &[f64], unsafe_: &[f64], fpr: f64) -> f64 {
        let t = threshold_from_scores(safe, fpr).unwrap();
        unsafe_.iter().filter(|&&s| s > t).count() as f64 / unsafe_.len() as f64
    }

    #[test]
    fn separable_gaussians_high_recall() {
        let mut rng = RngState::new(21);
        let train = separable_dataset(&mut rng, 100, 8, 16, 6.0);
        let held = separable_dataset(&mut rng, 100, 8, 16, 6.0);
        let cfg = ProbeConfig { arch: ProbeArch::Linear, layer: 0, input_dim: 16 };
        let (probe, stats) =
            train_probe_tokenwise(cfg, &train, &ProbeTrainConfig::default(), &mut RngState::new(1))
                .unwrap();
        assert!(stats.final_loss() < stats.initial());
        let (safe, unsafe_) = completion_scores(&probe, &held, Aggregation::Mean);
        let recall = recall_at(&safe, &unsafe_, 0.01);
        assert!(recall >= 0.99, "recall {recall}");
    }

    #[test]
    fn flipped_labels_are_score_symmetric() {
        let mut rng = RngState::new(22);
        let train = separable_dataset(&mut rng, 40, 6, 8, 4.0);
        let flipped: Vec<(ActivationTrace, bool)> =
            train.iter().map(|(t, l)| (t.clone(), !l)).collect();
        let cfg = ProbeConfig { arch: ProbeArch::Linear, layer: 0, input_dim: 8 };
        let hp = ProbeTrainConfig { epochs: 10, ..Default::default() };
        let (p1, _) = train_probe_tokenwise(cfg.clone(), &train, &hp, &mut RngState::new(5)).unwrap();
        let (p2, _) = train_probe_tokenwise(cfg, &flipped, &hp, &mut RngState::new(5)).unwrap();
        // Zero-init linear probes + identical batch order: flipping labels
        // exactly negates every update, so logits negate bit-for-bit.
        let held = separable_dataset(&mut rng, 30, 6, 8, 4.0);
        for (trace, _) in &held {
            let l1 = p1.logits_tokenwise(trace).unwrap();
            let l2 = p2.logits_tokenwise(trace).unwrap();
            for (a, b) in l1.iter().zip(&l2) {
                assert!((a + b).abs() < 1e-6, "{a} vs {b}");
            }
        }
        // Hence recall under score negation is identical: -score2 ranks
        // completions exactly like score1 does.
        let (safe1, unsafe1) = completion_scores(&p1, &held, Aggregation::Mean);
        let neg = |v: &[f64]| v.iter().map(|&s| -s).collect::<Vec<f64>>();
        let (safe2, unsafe2) = completion_scores(&p2, &held, Aggregation::Mean);
        let r1 = recall_at(&safe1, &unsafe1, 0.05);
        let r2 = recall_at(&neg(&safe2), &neg(&unsafe2), 0.05);
        assert_eq!(r1, r2);
    }

    #[test]
    fn maxpool_k1_equals_loss_on_max_token() {
        // With k = 1 the gathered node is exactly the max-score token.
        let mut rng = RngState::new(23);
        let data = separable_dataset(&mut rng, 10, 5, 8, 3.0);
        let cfg = ProbeConfig { arch: ProbeArch::Linear, layer: 0, input_dim: 8 };
        let hp = ProbeTrainConfig { epochs: 3, ..ProbeTrainConfig::maxpool_default() };
        let (probe, _) = train_probe_maxpool(cfg, &data, 1, &hp, &mut RngState::new(2)).unwrap();
        for (trace, _) in data.iter().take(4) {
            let scores = probe.scores_f64(trace).unwrap();
            let top = top_k_indices(
                &probe.logits_tokenwise(trace).unwrap(),
                1,
            );
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(scores[top[0]], max);
        }
    }

    #[test]
    fn maxpool_k_at_least_t_equals_mean_pooling() {
        let mut rng = RngState::new(24);
        let data = separable_dataset(&mut rng, 8, 4, 8, 3.0);
        let cfg = ProbeConfig { arch: ProbeArch::Linear, layer: 0, input_dim: 8 };
        let hp = ProbeTrainConfig { epochs: 4, batch_size: 4, lr: 1e-3 };
        // k much larger than any trace: top-k mean is the mean over all tokens.
        let (pa, sa) = train_probe_maxpool(cfg.clone(), &data, 100, &hp, &mut RngState::new(3)).unwrap();
        let (pb, sb) = train_probe_maxpool(cfg, &data, 4, &hp, &mut RngState::new(3)).unwrap();
        // Each trace has exactly 4 tokens, so k=100 and k=4 are the same program.
        assert_eq!(sa.epoch_losses, sb.epoch_losses);
        assert_eq!(pa.params.fingerprint(), pb.params.fingerprint());
    }

    #[test]
    fn maxpool_beats_tokenwise_on_planted_token() {
        // Unsafe traces have a single informative token; the other 23 match
        // the safe distribution. Tokenwise training sees 23 of 24 unsafe
        // labels on noise, so its slope stays moderate and the max over a
        // long safe trace overlaps the planted score. Maxpool training
        // optimizes the top-k statistic directly.
        let mut rng = RngState::new(25);
        let d = 8;
        let t = 24;
        let make = |rng: &mut RngState, planted: bool| -> (ActivationTrace, bool) {
            let mut data = Vec::with_capacity(t * d);
            for tok in 0..t {
                for j in 0..d {
                    let mut v = rng.normal_f32();
                    if planted && tok == 5 && j == 0 {
                        v += 4.0;
                    }
                    data.push(v);
                }
            }
            (
                ActivationTrace {
                    layer: 0,
                    vectors: Tensor::from_vec(vec![t, d], data).unwrap(),
                    token_ids: vec![0; t],
                },
                planted,
            )
        };
        let train: Vec<_> = (0..600).map(|i| make(&mut rng, i % 2 == 0)).collect();
        let held: Vec<_> = (0..200).map(|i| make(&mut rng, i % 2 == 0)).collect();
        let cfg = ProbeConfig { arch: ProbeArch::Mlp { hidden: 8 }, layer: 0, input_dim: d };
        let (tok_probe, _) = train_probe_tokenwise(
            cfg.clone(),
            &train,
            &ProbeTrainConfig::default(),
            &mut RngState::new(6),
        )
        .unwrap();
        let hp = ProbeTrainConfig { epochs: 120, batch_size: 16, lr: 3e-3 };
        let (max_probe, _) =
            train_probe_maxpool(cfg, &train, 1, &hp, &mut RngState::new(6)).unwrap();
        let (s1, u1) = completion_scores(&tok_probe, &held, Aggregation::Max);
        let (s2, u2) = completion_scores(&max_probe, &held, Aggregation::Max);
        let r_tok = recall_at(&s1, &u1, 0.05);
        let r_max = recall_at(&s2, &u2, 0.05);
        assert!(
            r_max > r_tok,
            "maxpool recall {r_max} should beat tokenwise {r_tok} under max aggregation"
        );
    }

    #[test]
    fn ortho_stat_examples() {
        let mk = |w: Vec<f32>| {
            let d = w.len();
            let mut p = ParameterStore::new();
            p.insert("w", Tensor::from_vec(vec![d, 1], w).unwrap());
            p.insert("b", Tensor::zeros(vec![1]));
            Probe {
                config: ProbeConfig { arch: ProbeArch::Linear, layer: 0, input_dim: d },
                params: p,
                provenance: Provenance::unversioned(Regime::Tokenwise),
            }
        };
        // Exactly orthogonal -> 0.
        let orth = vec![mk(vec![1.0, 0.0, 0.0]), mk(vec![0.0, 2.0, 0.0])];
        assert_eq!(ensemble_ortho_stat(&orth).unwrap(), 0.0);
        // Identical -> 1.
        let same = vec![mk(vec![1.0, 1.0, 0.0]), mk(vec![1.0, 1.0, 0.0])];
        assert!((ensemble_ortho_stat(&same).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_trains_and_decorrelates() {
        let mut rng = RngState::new(26);
        let train = separable_dataset(&mut rng, 60, 6, 16, 5.0);
        let hp = ProbeTrainConfig { epochs: 15, ..Default::default() };
        let (probes, stats) =
            train_ensemble(4, &train, 0.1, &hp, &mut RngState::new(7)).unwrap();
        assert_eq!(probes.len(), 4);
        assert!(stats.final_loss() < stats.initial());
        let stat = ensemble_ortho_stat(&probes).unwrap();
        assert!(stat < 0.8, "mean |cos| {stat}");
        // Members should individually classify.
        let held = separable_dataset(&mut rng, 40, 6, 16, 5.0);
        let (safe, unsafe_) = completion_scores(&probes[0], &held, Aggregation::Mean);
        assert!(recall_at(&safe, &unsafe_, 0.05) > 0.9);
    }

    #[test]
    fn single_class_data_is_error() {
        let mut rng = RngState::new(27);
        let data: Vec<(ActivationTrace, bool)> =
            (0..10).map(|_| (gauss_trace(&mut rng, 4, 8, &[0.0; 8]), true)).collect();
        let cfg = ProbeConfig { arch: ProbeArch::Linear, layer: 0, input_dim: 8 };
        assert!(train_probe_tokenwise(cfg, &data, &ProbeTrainConfig::default(), &mut rng).is_err());
    }
}
