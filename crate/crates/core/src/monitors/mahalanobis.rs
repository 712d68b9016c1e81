//! Gaussian anomaly detector: fit mean and ridge-regularized covariance on
//! benign token activations, score by Mahalanobis distance.

use crate::error::{Error, Result};
use crate::model::transformer::ActivationTrace;
use crate::numerics::linalg::{cholesky, solve_lower};

#[derive(Debug, Clone)]
pub struct GaussianDetector {
    pub mean: Vec<f64>,
    /// Covariance before the ridge term, row-major (d, d).
    pub covariance: Vec<f64>,
    pub ridge: f64,
    /// Cholesky factor of (covariance + ridge * I).
    chol: Vec<f64>,
}

/// Fit on pooled token vectors from benign traces.
pub fn mahalanobis_fit(benign: &[ActivationTrace], ridge: f64) -> Result<GaussianDetector> {
    let rows: Vec<&[f32]> = benign
        .iter()
        .flat_map(|t| (0..t.len()).map(move |i| t.vectors.row(i)))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyInput("mahalanobis_fit with no token vectors".into()));
    }
    let d = rows[0].len();
    if rows.len() < d + 1 {
        log::warn!("mahalanobis_fit: {} samples for dimension {d}; covariance will be degenerate", rows.len());
    }
    if ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be non-negative".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in &rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for r in &rows {
        for j in 0..d {
            centered[j] = r[j] as f64 - mean[j];
        }
        for i in 0..d {
            let ci = centered[i];
            let row = &mut cov[i * d..(i + 1) * d];
            for (cv, &cj) in row.iter_mut().zip(centered.iter()) {
                *cv += ci * cj;
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n;
    }
    let mut ridged = cov.clone();
    for i in 0..d {
        ridged[i * d + i] += ridge;
    }
    let chol = cholesky(&ridged, d)
        .map_err(|e| Error::Singular(format!("covariance singular despite ridge {ridge}: {e}")))?;
    Ok(GaussianDetector { mean, covariance: cov, ridge, chol })
}

/// sqrt((x - mu)^T (Sigma + ridge I)^-1 (x - mu))
pub fn mahalanobis_score(det: &GaussianDetector, x: &[f32]) -> Result<f64> {
    let d = det.mean.len();
    if x.len() != d {
        return Err(Error::ShapeMismatch(format!("vector dim {} vs detector dim {d}", x.len())));
    }
    let diff: Vec<f64> = x.iter().zip(det.mean.iter()).map(|(&a, &m)| a as f64 - m).collect();
    let y = solve_lower(&det.chol, &diff, d);
    Ok(y.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Completion-level anomaly score: mean over token scores.
pub fn mahalanobis_score_trace(det: &GaussianDetector, trace: &ActivationTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyInput("mahalanobis score of empty trace".into()));
    }
    let mut total = 0.0;
    for i in 0..trace.len() {
        total += mahalanobis_score(det, trace.vectors.row(i))?;
    }
    Ok(total / trace.len() as f64)
}
