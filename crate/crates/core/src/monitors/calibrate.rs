//! Threshold calibration at a target false-positive rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::transformer::ActivationTrace;
use crate::monitors::aggregate::{aggregate, Aggregation};
use crate::monitors::probe::Probe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdBasis {
    /// Calibrate on aggregated completion-level scores (default; matches how
    /// training thresholds are reported).
    Completion,
    /// Calibrate on the pooled token-level score list.
    Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    pub value: f64,
    pub target_fpr: f64,
    pub basis: ThresholdBasis,
    pub calibration_id: String,
}

/// The decision rule shared by calibration and recall measurement: the
/// smallest observed score T such that fraction(scores > T) <= fpr, under
/// strict inequality.
pub fn threshold_from_scores(scores: &[f64], fpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("threshold over empty score list".into()));
    }
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::InvalidArgument(format!("target fpr {fpr} outside (0,1)")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    // Two-pointer sweep: for ascending candidates, the first strictly-greater
    // index only moves forward.
    let mut k = 0usize;
    for i in 0..n {
        if k <= i {
            k = i + 1;
        }
        while k < n && sorted[k] <= sorted[i] {
            k += 1;
        }
        let above = n - k;
        if above as f64 / n as f64 <= fpr {
            return Ok(sorted[i]);
        }
    }
    Ok(*sorted.last().unwrap())
}

/// Calibrate a probe threshold on safe traces so the empirical FPR does not
/// exceed `target_fpr`, choosing the smallest such threshold.
pub fn calibrate_threshold(
    probe: &Probe,
    g: Aggregation,
    safe_traces: &[ActivationTrace],
    target_fpr: f64,
    basis: ThresholdBasis,
) -> Result<CalibratedThreshold> {
    if safe_traces.is_empty() {
        return Err(Error::EmptyInput("calibration set is empty".into()));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidArgument(format!("target fpr {target_fpr} outside (0,1)")));
    }
    let scores = match basis {
        ThresholdBasis::Completion => {
            let mut out = Vec::with_capacity(safe_traces.len());
            for t in safe_traces {
                if t.is_empty() {
                    continue;
                }
                out.push(aggregate(&probe.scores_f64(t)?, g)?);
            }
            out
        }
        ThresholdBasis::Token => {
            let mut out = Vec::new();
            for t in safe_traces {
                out.extend(probe.scores_f64(t)?);
            }
            out
        }
    };
    if scores.is_empty() {
        return Err(Error::EmptyInput("calibration set had no scorable tokens".into()));
    }
    let recommended = (1.0 / target_fpr).ceil() as usize;
    if scores.len() < recommended {
        log::warn!(
            "calibrating at fpr {} with only {} samples (recommend >= {})",
            target_fpr,
            scores.len(),
            recommended
        );
    }
    Ok(CalibratedThreshold {
        value: threshold_from_scores(&scores, target_fpr)?,
        target_fpr,
        basis,
        calibration_id: String::new(),
    })
}
