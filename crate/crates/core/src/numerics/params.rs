//! Named parameter tensors with matching gradient buffers and an Adam
//! optimizer state. Insertion order is preserved so that serialization and
//! iteration are deterministic.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Param<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ParameterStore<T = f32> {
    entries: IndexMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let shape = value.shape().to_vec();
        let zero = Tensor::zeros(shape);
        self.entries.insert(
            name.to_string(),
            Param { value, grad: zero.clone(), m: zero.clone(), v: zero },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn grad(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.grad.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name}: {:?} vs {:?}",
                g.shape(),
                p.grad.shape()
            )));
        }
        for (acc, &x) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *acc = *acc + x;
        }
        Ok(())
    }

    /// One Adam update from the accumulated gradients, then zero them.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_c(ADAM_BETA1);
        let b2 = T::from_f64_c(ADAM_BETA2);
        let one = T::one();
        let corr1 = T::from_f64_c(1.0 - ADAM_BETA1.powi(t));
        let corr2 = T::from_f64_c(1.0 - ADAM_BETA2.powi(t));
        let eps = T::from_f64_c(ADAM_EPS);
        let lr = T::from_f64_c(lr);
        for (name, p) in self.entries.iter_mut() {
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i];
                if !g.is_finite() {
                    return Err(Error::Diverged(format!("non-finite gradient in {name}")));
                }
                let m = b1 * p.m.data()[i] + (one - b1) * g;
                let v = b2 * p.v.data()[i] + (one - b2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / corr1;
                let v_hat = v / corr2;
                let x = p.value.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
                p.value.data_mut()[i] = x;
            }
            p.grad.data_mut().fill(T::zero());
        }
        Ok(())
    }

    /// Plain SGD step from accumulated gradients, then zero them.
    pub fn sgd_step(&mut self, lr: f64) {
        let lr = T::from_f64_c(lr);
        for p in self.entries.values_mut() {
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i];
                p.value.data_mut()[i] = p.value.data()[i] - lr * g;
            }
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn map_precision<U: Real>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, p) in &self.entries {
            out.insert(name, p.value.map(|x| U::from_f64_c(x.to_f64_c())));
        }
        out
    }
}

impl ParameterStore<f32> {
    /// Order- and bit-sensitive fingerprint over names, shapes, and values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0x9dc5cbf29ce48422;
        for (name, p) in &self.entries {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= p.value.fingerprint();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
