//! The policy model: a small decoder-only transformer with residual-stream
//! taps, autoregressive sampling, KL against a frozen reference, supervised
//! pretraining, and a bit-exact checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod pretrain;
pub mod sampling;
pub mod transformer;

pub use config::{micro_config, ModelConfig};
pub use pretrain::{eval_ce, supervised_pretrain, PretrainConfig, PretrainReport};
pub use sampling::{prefill, sample_completions, sample_one, Decoder, Sampled, SamplingConfig};
pub use transformer::{
    bind_params, forward_tokens, kl_categorical_logits, ActivationTrace, BoundModel, ForwardNodes,
    ModelRole, PatchSpec, PolicyModel,
};
