//! Small dense linear algebra: Cholesky factorization and triangular solves,
//! enough for the Mahalanobis detector's (Sigma + lambda I)^-1 quadratic form.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// stored row-major (d, d). Fails if the matrix is not positive definite.
pub fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), d * d);
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Singular(format!("cholesky pivot {diag} at column {j}")));
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Solve L y = b for lower-triangular L.
pub fn solve_lower(l: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_and_solves() {
        // A = M M^T with M lower-triangular.
        let m = [2.0, 0.0, 0.0, 0.5, 1.5, 0.0, -1.0, 0.3, 1.1];
        let d = 3;
        let mut a = vec![0.0; 9];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    a[i * d + j] += m[i * d + k] * m[j * d + k];
                }
            }
        }
        let l = cholesky(&a, d).unwrap();
        for (got, want) in l.iter().zip(m.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        let b = [1.0, -2.0, 0.5];
        let y = solve_lower(&l, &b, d);
        // Check L y = b
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..=i {
                s += l[i * d + k] * y[k];
            }
            assert!((s - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(cholesky(&a, 2).is_err());
    }
}
