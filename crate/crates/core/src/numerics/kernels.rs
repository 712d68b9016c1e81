//! Matrix kernels used by the graph ops and their backward passes.
//!
//! All loops keep the innermost index contiguous in both operands so the
//! auto-vectorizer can do its job; none of them reassociate reductions, so
//! results are bit-reproducible run to run.

use crate::numerics::real::Real;

/// c += a(m,k) * b(k,n)
pub fn matmul_nn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// c += a(m,k) * b(n,k)^T   (rows of b are dotted against rows of a)
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c_row[j] = c_row[j] + dot(a_row, b_row);
        }
    }
}

/// c += a(m,k)^T * b(m,n), producing (k,n)
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators for instruction-level
/// parallelism. The accumulation order is fixed, so results are stable.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let pa = &a[i * 4..i * 4 + 4];
        let pb = &b[i * 4..i * 4 + 4];
        acc[0] = acc[0] + pa[0] * pb[0];
        acc[1] = acc[1] + pa[1] * pb[1];
        acc[2] = acc[2] + pa[2] * pb[2];
        acc[3] = acc[3] + pa[3] * pb[3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// y += x(k) * w(k,n): vector-matrix product against a row-major matrix.
pub fn vecmat_acc<T: Real>(x: &[T], w: &[T], y: &mut [T], k: usize, n: usize) {
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(y.len(), n);
    for (kk, &xv) in x.iter().enumerate() {
        let w_row = &w[kk * n..(kk + 1) * n];
        for (yv, &wv) in y.iter_mut().zip(w_row.iter()) {
            *yv = *yv + xv * wv;
        }
    }
}

pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x.iter()) {
        *yv = *yv + alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // nt: run a * b2^T where b2 = b^T, should reproduce a*b.
        let mut b_t = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                b_t[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt_acc(&a, &b_t, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: a^T(k,m) * a(m? ...) — check a^T * b3 with b3 (m,n)
        let b3: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.71).sin()).collect();
        let mut c3 = vec![0.0; k * n];
        matmul_tn_acc(&a, &b3, &mut c3, m, k, n);
        for kk in 0..k {
            for j in 0..n {
                let mut want = 0.0;
                for i in 0..m {
                    want += a[i * k + kk] * b3[i * n + j];
                }
                assert!((c3[kk * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vecmat_matches_matmul_row() {
        let (k, n) = (9, 4);
        let x: Vec<f64> = (0..k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.17).sin()).collect();
        let mut y = vec![0.0; n];
        vecmat_acc(&x, &w, &mut y, k, n);
        let want = naive(&x, &w, 1, k, n);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
