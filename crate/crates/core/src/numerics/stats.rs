//! Order statistics.

use crate::error::{Error, Result};

/// Quantile with the "lower" convention: sort ascending and take the element
/// at index ceil(q*n) - 1, clamped to [0, n-1]. The product q*n is nudged by
/// 1e-9 before the ceil so that exact multiples (0.9 * 10) do not round up
/// through float representation error.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile of empty slice".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile fraction {q} outside [0,1]")));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let t = q * n as f64;
    let idx = ((t - 1e-9).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
    Ok(sorted[idx])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_pop(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lower_convention_examples() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&[5.0], 0.99).unwrap(), 5.0);
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(quantile(&v, 0.9).unwrap(), 0.9);
        assert_eq!(quantile(&v, 0.0).unwrap(), 0.1);
        assert_eq!(quantile(&v, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(quantile(&[], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_q(mut vals in proptest::collection::vec(-1e3f64..1e3, 1..40),
                         q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
            vals.iter_mut().for_each(|v| *v = (*v * 16.0).round() / 16.0);
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(quantile(&vals, lo).unwrap() <= quantile(&vals, hi).unwrap());
        }

        #[test]
        fn permutation_invariant(vals in proptest::collection::vec(-1e3f64..1e3, 1..40),
                                 q in 0.0f64..1.0, seed in 0u64..1000) {
            let mut shuffled = vals.clone();
            let mut rng = crate::numerics::rng::RngState::new(seed);
            rng.shuffle(&mut shuffled);
            prop_assert_eq!(quantile(&vals, q).unwrap(), quantile(&shuffled, q).unwrap());
        }
    }
}
