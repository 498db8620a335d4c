//! Numerically stable scalar and vector kernels.
//!
//! Score vectors are plain slices. Entries must be finite, except that
//! negative infinity is accepted everywhere as the masked-token sentinel.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norms below this are treated as a zero vector by [`cosine_distance`].
pub const ZERO_NORM: f64 = 1e-12;

fn check_nan<S: Scalar>(values: &[S]) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NotANumber);
    }
    Ok(())
}

fn max_of<S: Scalar>(values: &[S]) -> S {
    values
        .iter()
        .copied()
        .fold(S::neg_infinity(), |m, v| if v > m { v } else { m })
}

/// `log Σ exp(v_i)` via max-shift.
///
/// An all-masked input returns negative infinity rather than an error.
pub fn log_sum_exp<S: Scalar>(values: &[S]) -> Result<S> {
    if values.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    check_nan(values)?;
    let m = max_of(values);
    if !m.is_finite() {
        return Ok(m);
    }
    let sum: S = values.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Softmax of `logits / tau`. Masked entries map to exactly zero.
pub fn softmax_tempered<S: Scalar>(logits: &[S], tau: S) -> Result<Vec<S>> {
    if !(tau > S::zero()) || !tau.is_finite() {
        return Err(Error::config(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    check_nan(logits)?;
    let m = max_of(logits);
    if !m.is_finite() {
        return Err(Error::EmptySupport);
    }
    let mut out: Vec<S> = logits
        .iter()
        .map(|&v| {
            if v == S::neg_infinity() {
                S::zero()
            } else {
                ((v - m) / tau).exp()
            }
        })
        .collect();
    let z: S = out.iter().copied().sum();
    for p in &mut out {
        *p = *p / z;
    }
    Ok(out)
}

/// Log-softmax. Masked entries stay at negative infinity.
pub fn log_softmax<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.is_empty() {
        return Err(Error::EmptySupport);
    }
    let z = log_sum_exp(logits)?;
    if !z.is_finite() {
        return Err(Error::EmptySupport);
    }
    Ok(logits.iter().map(|&v| v - z).collect())
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
///
/// If either vector has norm below [`ZERO_NORM`] the distance is 0: a layer
/// that did not move contributes no hesitation.
pub fn cosine_distance<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&y| y * y).sum::<S>().sqrt();
    let eps = S::of(ZERO_NORM);
    if na < eps || nb < eps {
        return Ok(S::zero());
    }
    let d = S::one() - dot / (na * nb);
    Ok(d.max(S::zero()).min(S::of(2.0)))
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `alpha * prev + (1 - alpha) * current`, elementwise.
pub fn ema_update<S: Scalar>(prev: &[S], current: &[S], alpha: S) -> Result<Vec<S>> {
    if !(alpha >= S::zero() && alpha < S::one()) {
        return Err(Error::config(format!("EMA alpha must lie in [0, 1), got {alpha}")));
    }
    if prev.len() != current.len() {
        return Err(Error::LengthMismatch {
            expected: prev.len(),
            actual: current.len(),
        });
    }
    let keep = S::one() - alpha;
    Ok(prev.iter().zip(current).map(|(&p, &c)| alpha * p + keep * c).collect())
}

/// Descending by value, ties by ascending index. NaN sorts last.
fn rank_order<S: Scalar>(values: &[S], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or_else(|| values[a].is_nan().cmp(&values[b].is_nan()))
        .then(a.cmp(&b))
}

/// Indices of the `k` largest entries, in rank order. Ties go to the lower index.
pub fn top_k_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    if k > 0 && k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(values, a, b));
    }
    idx.truncate(k);
    idx.sort_by(|&a, &b| rank_order(values, a, b));
    idx
}

/// First index holding the maximum value.
pub fn argmax_first<S: Scalar>(values: &[S]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if v > values[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lse_trivial_cases() {
        assert_eq!(log_sum_exp(&[-0.5f64]).unwrap(), -0.5);
        assert!((log_sum_exp(&[0.0f64, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(log_sum_exp::<f64>(&[]), Err(Error::EmptyAggregation)));
        let all_masked = [f64::NEG_INFINITY; 3];
        assert_eq!(log_sum_exp(&all_masked).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(log_sum_exp(&[0.0, f64::NAN]), Err(Error::NotANumber)));
    }

    #[test]
    fn softmax_trivial_cases() {
        let p = softmax_tempered(&[1.0f64, 1.0, 1.0], 1.0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for tau in [0.1, 1.0, 7.5] {
            let p = softmax_tempered(&[4.2f64, 4.2], tau).unwrap();
            assert_eq!(p, vec![0.5, 0.5]);
        }
        let p = softmax_tempered(&[0.0f64, f64::NEG_INFINITY, 1.0], 1.0).unwrap();
        assert_eq!(p[1], 0.0);
        assert!(matches!(softmax_tempered(&[1.0f64], 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax_tempered(&[1.0f64], -1.0), Err(Error::Config(_))));
        assert!(matches!(
            softmax_tempered(&[f64::NEG_INFINITY], 1.0),
            Err(Error::EmptySupport)
        ));
    }

    #[test]
    fn cosine_trivial_cases() {
        let v = [0.3f64, -1.2, 4.0];
        assert!(cosine_distance(&v, &v).unwrap() < 1e-15);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_distance(&v, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0f64, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_distance(&[1.0f64], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sigmoid_center_and_symmetry() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
    }

    #[test]
    fn ema_trivial_cases() {
        let v = [1.5f64, -2.0];
        assert_eq!(ema_update(&v, &v, 0.7).unwrap(), v.to_vec());
        assert_eq!(ema_update(&[9.0f64, 9.0], &v, 0.0).unwrap(), v.to_vec());
        assert_eq!(ema_update(&[1.0f64, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(ema_update(&v, &v, 1.0), Err(Error::Config(_))));
        assert!(matches!(ema_update(&v, &v, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_indices(&[3.0f64, 1.0, 2.0, 0.0], 2), vec![0, 2]);
        assert_eq!(top_k_indices(&[1.0f64, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[1.0f64, 5.0], 10), vec![1, 0]);
        assert_eq!(argmax_first(&[1.0f64, 2.0, 2.0]), Some(1));
        assert_eq!(argmax_first::<f64>(&[]), None);
    }

    #[test]
    fn kernels_work_in_f32() {
        let p = softmax_tempered(&[2.0f32, 0.0], 2.0).unwrap();
        assert!((p[0] - 0.731_058_6).abs() < 1e-6);
        assert!((log_sum_exp(&[0.0f32, 0.0]).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, len)
    }

    proptest! {
        #[test]
        fn lse_bounds_and_shift(v in finite_vec(1..20), c in -100.0f64..100.0) {
            let l = log_sum_exp(&v).unwrap();
            prop_assert!(l >= max_of(&v));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((log_sum_exp(&shifted).unwrap() - (l + c)).abs() < 1e-10);
        }

        #[test]
        fn softmax_is_distribution_preserving_argmax(v in finite_vec(1..20), tau in 0.05f64..10.0) {
            let p = softmax_tempered(&v, tau).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let top = max_of(&v);
            let arg = argmax_first(&p).unwrap();
            prop_assert_eq!(v[arg], top);
        }

        #[test]
        fn softmax_shift_invariant(v in finite_vec(1..12), c in -30.0f64..30.0) {
            let p = softmax_tempered(&v, 1.0).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax_tempered(&shifted, 1.0).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_invariant(v in finite_vec(2..10), lambda in 0.01f64..100.0) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
            let scaled: Vec<f64> = v.iter().map(|x| x * lambda).collect();
            prop_assert!(cosine_distance(&v, &v).unwrap() < 1e-12);
            prop_assert!(cosine_distance(&v, &scaled).unwrap() < 1e-12);
        }

        #[test]
        fn ema_contracts_toward_current(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..10),
            alpha in 0.0f64..0.999,
        ) {
            let (prev, cur): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let out = ema_update(&prev, &cur, alpha).unwrap();
            let dist = |a: &[f64], b: &[f64]| {
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            prop_assert!(dist(&out, &cur) <= alpha * dist(&prev, &cur) + 1e-12);
        }

        #[test]
        fn sigmoid_monotone_and_symmetric(x in -40.0f64..40.0, dx in 0.001f64..5.0) {
            prop_assert!(sigmoid(x + dx) >= sigmoid(x));
            prop_assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-12);
        }
    }
}
