//! Principal components via power iteration with deflation.
//!
//! Only a handful of components are ever needed (2-D projections), so power
//! iteration on the implicit covariance beats a full eigendecomposition.

use crate::error::{Error, Result};
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

const MAX_ITERS: usize = 200;
const TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Pca {
    /// (k, d) orthonormal rows.
    pub components: Tensor<f64>,
    /// Variance captured by each component.
    pub eigenvalues: Vec<f64>,
    /// Column means removed before fitting.
    pub mean: Vec<f64>,
}

/// Fit the top-k principal components of `rows` (n, d) and return them with
/// the projections (n, k). Rows are mean-centered internally.
///
/// If the data has rank below k, the trailing components are arbitrary unit
/// vectors orthogonal to the earlier ones (their eigenvalues are ~0).
pub fn principal_components(rows: &Tensor<f64>, k: usize) -> Result<(Pca, Tensor<f64>)> {
    let (n, d) = (rows.rows(), rows.cols());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pca needs at least 2 rows, got {n}")));
    }
    if k > d {
        return Err(Error::InvalidArgument(format!("pca k={k} exceeds dimension {d}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(rows.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // Centered working copy; deflated in place after each component.
    let mut x: Vec<f64> = Vec::with_capacity(n * d);
    for r in 0..n {
        for (j, &v) in rows.row(r).iter().enumerate() {
            x.push(v - mean[j]);
        }
    }

    let mut components = Tensor::<f64>::zeros(vec![k, d]);
    let mut eigenvalues = vec![0.0; k];
    for comp in 0..k {
        let mut rng = RngState::new(PCA_INIT_SEED ^ comp as u64);
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal_f64()).collect();
        // Orthogonalize the start vector against found components.
        orthogonalize(&mut v, &components, comp);
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERS {
            // w = (1/n) X^T (X v)
            let mut xv = vec![0.0; n];
            for r in 0..n {
                let row = &x[r * d..(r + 1) * d];
                xv[r] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            }
            let mut w = vec![0.0; d];
            for r in 0..n {
                let row = &x[r * d..(r + 1) * d];
                let s = xv[r] / n as f64;
                for (wj, &rj) in w.iter_mut().zip(row) {
                    *wj += s * rj;
                }
            }
            orthogonalize(&mut w, &components, comp);
            lambda = norm(&w);
            if lambda < 1e-14 {
                // Rank-deficient: keep the current (arbitrary orthogonal) v.
                lambda = 0.0;
                break;
            }
            for wj in w.iter_mut() {
                *wj /= lambda;
            }
            let delta: f64 = w.iter().zip(v.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let delta_neg: f64 =
                w.iter().zip(v.iter()).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            v.copy_from_slice(&w);
            if delta.min(delta_neg) < TOL {
                break;
            }
        }
        components.data_mut()[comp * d..(comp + 1) * d].copy_from_slice(&v);
        eigenvalues[comp] = lambda;
        // Deflate: remove the component's contribution from every row.
        for r in 0..n {
            let row = &mut x[r * d..(r + 1) * d];
            let proj: f64 = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            for (rj, &vj) in row.iter_mut().zip(v.iter()) {
                *rj -= proj * vj;
            }
        }
    }

    let mut projections = Tensor::<f64>::zeros(vec![n, k]);
    for r in 0..n {
        for comp in 0..k {
            let c = components.row(comp);
            let mut s = 0.0;
            for (j, &v) in rows.row(r).iter().enumerate() {
                s += (v - mean[j]) * c[j];
            }
            projections.data_mut()[r * k + comp] = s;
        }
    }
    Ok((Pca { components, eigenvalues, mean }, projections))
}

fn orthogonalize(v: &mut [f64], components: &Tensor<f64>, count: usize) {
    let d = v.len();
    for c in 0..count {
        let comp = &components.data()[c * d..(c + 1) * d];
        let proj: f64 = v.iter().zip(comp.iter()).map(|(a, b)| a * b).sum();
        for (vj, &cj) in v.iter_mut().zip(comp.iter()) {
            *vj -= proj * cj;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Fixed seed for the power-iteration start vectors; PCA results must not
/// depend on caller RNG state.
const PCA_INIT_SEED: u64 = 0x50_43_41;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngState;

    #[test]
    fn line_through_origin_recovers_direction() {
        let dir = [3.0f64, -1.0, 2.0];
        let nrm = norm(&dir);
        let unit: Vec<f64> = dir.iter().map(|x| x / nrm).collect();
        let mut rng = RngState::new(1);
        let mut data = Vec::new();
        for _ in 0..200 {
            let t = rng.normal_f64() * 2.0;
            for &u in &unit {
                data.push(t * u);
            }
        }
        let rows = Tensor::from_vec(vec![200, 3], data).unwrap();
        let (pca, _) = principal_components(&rows, 1).unwrap();
        let cos: f64 = pca.components.row(0).iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 0.999, "cos {cos}");
    }

    #[test]
    fn isotropic_gaussian_eigenvalues_close() {
        let mut rng = RngState::new(2);
        let n = 10_000;
        let data: Vec<f64> = (0..n * 2).map(|_| rng.normal_f64()).collect();
        let rows = Tensor::from_vec(vec![n, 2], data).unwrap();
        let (pca, _) = principal_components(&rows, 2).unwrap();
        let (l1, l2) = (pca.eigenvalues[0], pca.eigenvalues[1]);
        assert!((l1 - l2).abs() / l1.max(l2) < 0.10, "eigenvalues {l1} {l2}");
    }

    #[test]
    fn axis_aligned_ellipse_explained_variance() {
        let mut rng = RngState::new(3);
        let n = 20_000;
        let mut data = Vec::with_capacity(n * 2);
        for _ in 0..n {
            data.push(rng.normal_f64() * 2.0); // variance 4
            data.push(rng.normal_f64()); // variance 1
        }
        let rows = Tensor::from_vec(vec![n, 2], data).unwrap();
        let (pca, _) = principal_components(&rows, 2).unwrap();
        let ratio = pca.eigenvalues[0] / (pca.eigenvalues[0] + pca.eigenvalues[1]);
        assert!((ratio - 0.8).abs() < 0.05, "explained variance ratio {ratio}");
    }

    #[test]
    fn components_orthonormal() {
        let mut rng = RngState::new(4);
        let n = 500;
        let d = 6;
        let data: Vec<f64> = (0..n * d).map(|_| rng.normal_f64()).collect();
        let rows = Tensor::from_vec(vec![n, d], data).unwrap();
        let (pca, proj) = principal_components(&rows, 3).unwrap();
        for i in 0..3 {
            let ni = norm(pca.components.row(i));
            assert!((ni - 1.0).abs() < 1e-4, "norm {ni}");
            for j in 0..i {
                let dot: f64 =
                    pca.components.row(i).iter().zip(pca.components.row(j)).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-4, "dot {dot}");
            }
        }
        assert_eq!(proj.shape(), &[n, 3]);
    }

    #[test]
    fn rank_deficient_fills_orthogonal_units() {
        // All points on one line in 3-D; ask for 3 components.
        let data: Vec<f64> = (0..50).flat_map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let rows = Tensor::from_vec(vec![50, 3], data).unwrap();
        let (pca, _) = principal_components(&rows, 3).unwrap();
        for i in 0..3 {
            assert!((norm(pca.components.row(i)) - 1.0).abs() < 1e-4);
        }
        assert!(pca.eigenvalues[2] < 1e-8);
    }
}
