//! The latent-space monitor suite: probe architectures and aggregations,
//! tokenwise/maxpool/ensemble training, FPR threshold calibration, and the
//! Mahalanobis anomaly detector.

pub mod aggregate;
pub mod calibrate;
pub mod mahalanobis;
pub mod probe;
pub mod train;

pub use aggregate::{aggregate, Aggregation};
pub use calibrate::{calibrate_threshold, threshold_from_scores, CalibratedThreshold, ThresholdBasis};
pub use mahalanobis::{mahalanobis_fit, mahalanobis_score, mahalanobis_score_trace, GaussianDetector};
pub use probe::{
    build_probe_logits, load_probe, save_probe, Probe, ProbeArch, ProbeConfig, ProbeMask,
    Provenance, Regime,
};
pub use train::{
    ensemble_ortho_stat, train_ensemble, train_probe_maxpool, train_probe_tokenwise,
    ProbeTrainConfig, ProbeTrainStats,
};
