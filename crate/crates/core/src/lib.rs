//! Core library for the obfusc-lab workbench: a small autoregressive policy
//! model, latent-space probe monitors over its residual stream, the reward
//! stack and GRPO trainer used to teach the policy to evade those monitors,
//! and the evaluation suite that measures whether it succeeded.

pub mod error;
pub mod model;
pub mod monitors;
pub mod numerics;
pub mod taskgen;

pub use error::{Error, Result};
