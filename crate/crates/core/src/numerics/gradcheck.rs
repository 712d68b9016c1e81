//! Central finite differences — the independent oracle every reverse-mode
//! gradient in this crate is checked against. Runs in f64; the training path
//! itself stays in f32.

use indexmap::IndexMap;

use crate::numerics::params::ParameterStore;
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

/// (f(p + eps) - f(p - eps)) / (2 eps) for every coordinate of every
/// parameter. Intended for small stores; use `check_random_coords` on models.
pub fn finite_difference_gradient<F>(
    f: &mut F,
    params: &ParameterStore<f64>,
    eps: f64,
) -> IndexMap<String, Tensor<f64>>
where
    F: FnMut(&ParameterStore<f64>) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut out = IndexMap::new();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut work = params.clone();
    for name in names {
        let numel = params.get(&name).numel();
        let mut g = vec![0.0; numel];
        for i in 0..numel {
            g[i] = finite_difference_coord(f, &mut work, &name, i, eps);
        }
        out.insert(name.clone(), Tensor::from_vec(params.get(&name).shape().to_vec(), g).unwrap());
    }
    out
}

/// Central difference along a single coordinate. Restores the perturbed value.
pub fn finite_difference_coord<F>(
    f: &mut F,
    params: &mut ParameterStore<f64>,
    name: &str,
    index: usize,
    eps: f64,
) -> f64
where
    F: FnMut(&ParameterStore<f64>) -> f64,
{
    let orig = params.get(name).data()[index];
    params.get_mut(name).data_mut()[index] = orig + eps;
    let plus = f(params);
    params.get_mut(name).data_mut()[index] = orig - eps;
    let minus = f(params);
    params.get_mut(name).data_mut()[index] = orig;
    (plus - minus) / (2.0 * eps)
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare analytic gradients against central differences on `n_coords`
/// randomly chosen coordinates. Relative error uses max(|a|, |n|) as the
/// scale; coordinates where both sides are below 1e-8 count as exact.
pub fn check_random_coords<F>(
    f: &mut F,
    params: &ParameterStore<f64>,
    analytic: &IndexMap<String, Tensor<f64>>,
    n_coords: usize,
    eps: f64,
    rng: &mut RngState,
) -> Vec<CoordCheck>
where
    F: FnMut(&ParameterStore<f64>) -> f64,
{
    let mut flat: Vec<(String, usize)> = Vec::new();
    for name in params.names() {
        for i in 0..params.get(name).numel() {
            flat.push((name.to_string(), i));
        }
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        let (name, index) = flat[rng.below(flat.len())].clone();
        let numeric = finite_difference_coord(f, &mut work, &name, index, eps);
        let analytic_v = analytic
            .get(&name)
            .map(|t| t.data()[index])
            .unwrap_or(0.0);
        let scale = analytic_v.abs().max(numeric.abs());
        let rel_err = if scale < 1e-8 { 0.0 } else { (analytic_v - numeric).abs() / scale };
        out.push(CoordCheck { name, index, analytic: analytic_v, numeric, rel_err });
    }
    out
}

pub fn max_rel_err(checks: &[CoordCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", Tensor::from_vec(vec![1], vec![3.0]).unwrap());
        let mut f = |p: &ParameterStore<f64>| p.get("x").data()[0].powi(2);
        let g = finite_difference_gradient(&mut f, &store, 1e-3);
        assert!((g["x"].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sine_at_zero() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let mut f = |p: &ParameterStore<f64>| p.get("x").data()[0].sin();
        let g = finite_difference_gradient(&mut f, &store, 1e-3);
        assert!((g["x"].data()[0] - 1.0).abs() < 1e-6);
    }
}
