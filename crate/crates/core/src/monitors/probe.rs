//! Probe architectures over residual-stream activations: linear, one-hidden-
//! layer MLP, and a single-head attention probe with causal or sliding-window
//! masking. Every probe emits one pre-sigmoid logit per token; a sigmoid maps
//! it to a score in (0, 1).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::transformer::ActivationTrace;
use crate::numerics::graph::{sigmoid, Graph, Mask, NodeId};
use crate::numerics::params::ParameterStore;
use crate::numerics::real::Real;
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMask {
    Causal,
    Window(usize),
}

impl ProbeMask {
    pub fn to_graph_mask(self) -> Mask {
        match self {
            ProbeMask::Causal => Mask::Causal,
            ProbeMask::Window(w) => Mask::Window(w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProbeArch {
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    Attention {
        #[serde(default = "default_hidden")]
        proj_dim: usize,
        #[serde(default = "default_mask")]
        mask: ProbeMask,
    },
}

fn default_hidden() -> usize {
    512
}

fn default_mask() -> ProbeMask {
    ProbeMask::Causal
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub arch: ProbeArch,
    /// Residual-stream layer the probe reads.
    pub layer: usize,
    pub input_dim: usize,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        match self.arch {
            ProbeArch::Mlp { hidden } if hidden == 0 => {
                return Err(Error::InvalidConfig("mlp hidden dim must be > 0".into()))
            }
            ProbeArch::Attention { proj_dim, mask } => {
                if proj_dim == 0 {
                    return Err(Error::InvalidConfig("attention proj_dim must be > 0".into()));
                }
                if let ProbeMask::Window(w) = mask {
                    if w < 1 {
                        return Err(Error::InvalidConfig("attention window must be >= 1".into()));
                    }
                }
            }
            _ => {}
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("probe input_dim must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Regime {
    Tokenwise,
    Maxpool { k: usize },
    Ensemble { member: usize, of: usize },
}

/// Where a probe came from: which model's activations, which dataset, and
/// which training regime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub dataset_id: String,
    pub regime: Regime,
}

impl Provenance {
    pub fn unversioned(regime: Regime) -> Self {
        Self { model_id: "unversioned".into(), dataset_id: "unversioned".into(), regime }
    }
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub config: ProbeConfig,
    pub params: ParameterStore<f32>,
    pub provenance: Provenance,
}

impl Probe {
    /// Fresh probe. Linear probes start at zero (the BCE objective is convex
    /// there); MLP and attention probes use small random init.
    pub fn new(config: ProbeConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let mut params = ParameterStore::new();
        match config.arch {
            ProbeArch::Linear => {
                params.insert("w", Tensor::zeros(vec![d, 1]));
                params.insert("b", Tensor::zeros(vec![1]));
            }
            ProbeArch::Mlp { hidden } => {
                let std = (2.0 / d as f32).sqrt();
                params.insert("w1", rng.normal_tensor(vec![d, hidden], std));
                params.insert("b1", Tensor::zeros(vec![hidden]));
                params.insert("w2", rng.normal_tensor(vec![hidden, 1], (1.0 / hidden as f32).sqrt()));
                params.insert("b2", Tensor::zeros(vec![1]));
            }
            ProbeArch::Attention { proj_dim, .. } => {
                let std = (1.0 / d as f32).sqrt();
                params.insert("wq", rng.normal_tensor(vec![d, proj_dim], std));
                params.insert("bq", Tensor::zeros(vec![proj_dim]));
                params.insert("wk", rng.normal_tensor(vec![d, proj_dim], std));
                params.insert("bk", Tensor::zeros(vec![proj_dim]));
                params.insert("wv", rng.normal_tensor(vec![d, proj_dim], std));
                params.insert("bv", Tensor::zeros(vec![proj_dim]));
                params.insert("wo", rng.normal_tensor(vec![proj_dim, 1], (1.0 / proj_dim as f32).sqrt()));
                params.insert("bo", Tensor::zeros(vec![1]));
            }
        }
        Ok(Self { config, params, provenance: Provenance::unversioned(Regime::Tokenwise) })
    }

    fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        if !trace.is_empty() && trace.vectors.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "trace dim {} vs probe input_dim {}",
                trace.vectors.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid logit per token.
    pub fn logits_tokenwise(&self, trace: &ActivationTrace) -> Result<Vec<f32>> {
        self.check_trace(trace)?;
        if trace.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.input(trace.vectors.clone());
        let logits = build_probe_logits(&mut g, &self.params, &self.config, x, false);
        Ok(g.value(logits).data().to_vec())
    }

    /// Sigmoid score in (0,1) per token.
    pub fn forward_tokenwise(&self, trace: &ActivationTrace) -> Result<Vec<f32>> {
        Ok(self.logits_tokenwise(trace)?.into_iter().map(sigmoid).collect())
    }

    pub fn scores_f64(&self, trace: &ActivationTrace) -> Result<Vec<f64>> {
        Ok(self.forward_tokenwise(trace)?.into_iter().map(|s| s as f64).collect())
    }
}

/// Graph construction shared by probe inference and training.
pub fn build_probe_logits<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    config: &ProbeConfig,
    x: NodeId,
    trainable: bool,
) -> NodeId {
    let mut bind = |g: &mut Graph<T>, name: &str| {
        if trainable {
            g.param(params, name)
        } else {
            g.input(params.get(name).clone())
        }
    };
    match config.arch {
        ProbeArch::Linear => {
            let w = bind(g, "w");
            let b = bind(g, "b");
            let z = g.matmul(x, w);
            g.add_bias(z, b)
        }
        ProbeArch::Mlp { .. } => {
            let w1 = bind(g, "w1");
            let b1 = bind(g, "b1");
            let w2 = bind(g, "w2");
            let b2 = bind(g, "b2");
            let h = g.matmul(x, w1);
            let h = g.add_bias(h, b1);
            let h = g.relu(h);
            let z = g.matmul(h, w2);
            g.add_bias(z, b2)
        }
        ProbeArch::Attention { proj_dim, mask } => {
            let wq = bind(g, "wq");
            let bq = bind(g, "bq");
            let wk = bind(g, "wk");
            let bk = bind(g, "bk");
            let wv = bind(g, "wv");
            let bv = bind(g, "bv");
            let wo = bind(g, "wo");
            let bo = bind(g, "bo");
            let q = g.matmul(x, wq);
            let q = g.add_bias(q, bq);
            let k = g.matmul(x, wk);
            let k = g.add_bias(k, bk);
            let v = g.matmul(x, wv);
            let v = g.add_bias(v, bv);
            let scores = g.matmul_bt(q, k);
            let scores = g.scale(scores, T::from_f64_c(1.0 / (proj_dim as f64).sqrt()));
            let attn = g.softmax_rows_masked(scores, mask.to_graph_mask());
            let ctx = g.matmul(attn, v);
            let z = g.matmul(ctx, wo);
            g.add_bias(z, bo)
        }
    }
}

pub fn save_probe(path: &Path, probe: &Probe) -> Result<()> {
    let header = serde_json::json!({
        "kind": "probe",
        "config": probe.config,
        "provenance": probe.provenance,
    });
    write_container(
        path,
        &header,
        probe.params.names().map(|n| (n.to_string(), probe.params.get(n).clone())),
    )
}

pub fn load_probe(path: &Path) -> Result<Probe> {
    let (header, entries) = read_container(path)?;
    if header.get("kind").and_then(Value::as_str) != Some("probe") {
        return Err(Error::CorruptArtifact(format!("{}: not a probe checkpoint", path.display())));
    }
    let config: ProbeConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| Error::CorruptArtifact(format!("{}: missing config", path.display())))?,
    )?;
    config.validate()?;
    let provenance: Provenance = serde_json::from_value(
        header.get("provenance").cloned().ok_or_else(|| {
            Error::CorruptArtifact(format!("{}: missing provenance", path.display()))
        })?,
    )?;
    let mut params = ParameterStore::new();
    for (name, t) in entries {
        params.insert(&name, t);
    }
    Ok(Probe { config, params, provenance })
}
