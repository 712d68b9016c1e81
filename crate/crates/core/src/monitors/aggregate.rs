//! Reductions of per-token scores to a single completion-level score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Median,
    Max,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
            Aggregation::Max => "max",
        }
    }
}

/// Aggregate a non-empty score list. Median of an even count is the average
/// of the two middle values.
pub fn aggregate(scores: &[f64], g: Aggregation) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("aggregate over empty scores".into()));
    }
    Ok(match g {
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregation::Median => {
            let mut s = scores.to_vec();
            s.sort_by(|a, b| a.total_cmp(b));
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                (s[n / 2 - 1] + s[n / 2]) / 2.0
            }
        }
        Aggregation::Max => scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}
