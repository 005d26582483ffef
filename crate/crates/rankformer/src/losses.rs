//! Ranking losses: the listwise Softmax loss, listwide label derivation,
//! ordinal encoding, the ordinal BCE loss and the combined objective.

use crate::{Error, Result, Scalar};

/// Probabilities are clamped this far away from {0, 1} before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Numerically stable softmax (max subtraction).
pub fn softmax<F: Scalar>(scores: &[F]) -> Vec<F> {
    let max = scores
        .iter()
        .cloned()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp<F: Scalar>(scores: &[F]) -> F {
    let max = scores
        .iter()
        .cloned()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let sum = scores
        .iter()
        .fold(F::zero(), |a, &s| a + (s - max).exp());
    max + sum.ln()
}

/// Listwise Softmax loss: the negative dot product of the label vector with
/// the log-softmax of the scores. Identically zero for an all-zero label
/// vector.
pub fn softmax_loss<F: Scalar>(scores: &[F], labels: &[F]) -> Result<F> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "scores ({}) vs labels ({})",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("softmax_loss on empty list".into()));
    }
    let label_sum = labels.iter().fold(F::zero(), |a, &b| a + b);
    if label_sum == F::zero() {
        return Ok(F::zero());
    }
    let lse = log_sum_exp(scores);
    let dot = scores
        .iter()
        .zip(labels)
        .fold(F::zero(), |a, (&s, &y)| a + y * s);
    Ok(label_sum * lse - dot)
}

/// Gradient of [`softmax_loss`] with respect to the scores:
/// `(sum of labels) * softmax(scores) - labels`.
pub fn softmax_loss_grad<F: Scalar>(scores: &[F], labels: &[F]) -> Result<Vec<F>> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "scores ({}) vs labels ({})",
            scores.len(),
            labels.len()
        )));
    }
    let label_sum = labels.iter().fold(F::zero(), |a, &b| a + b);
    let probs = softmax(scores);
    Ok(probs
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| label_sum * p - y)
        .collect())
}

/// Listwide label: the maximum item label of the list.
pub fn listwide_label(labels: &[u8]) -> Result<u8> {
    labels
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::EmptyInput("listwide_label on empty list".into()))
}

/// Ordinal one-hot encoding of a listwide label: bit `k` (1-based) is set
/// iff `t >= k`. Monotone non-increasing by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrdinalEncoding {
    bits: Vec<bool>,
}

impl OrdinalEncoding {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn as_scalars<F: Scalar>(&self) -> Vec<F> {
        self.bits
            .iter()
            .map(|&b| if b { F::one() } else { F::zero() })
            .collect()
    }
}

pub fn ordinal_encode(t: u8, y_max: u8) -> Result<OrdinalEncoding> {
    if t > y_max {
        return Err(Error::LabelDomain {
            value: t as i64,
            max: y_max,
        });
    }
    Ok(OrdinalEncoding {
        bits: (1..=y_max).map(|k| t >= k).collect(),
    })
}

fn bce<F: Scalar>(p: F, target: F) -> F {
    let lo = F::from(PROB_CLAMP).unwrap();
    let hi = F::one() - lo;
    let p = p.max(lo).min(hi);
    -(target * p.ln() + (F::one() - target) * (F::one() - p).ln())
}

/// Ordinal loss: the sum of per-threshold binary cross-entropies between the
/// listwide prediction and the ordinal encoding of the listwide label.
pub fn ordinal_loss<F: Scalar>(prediction: &[F], t: u8) -> Result<F> {
    let y_max = prediction.len() as u8;
    let omega = ordinal_encode(t, y_max)?;
    let targets = omega.as_scalars::<F>();
    Ok(prediction
        .iter()
        .zip(&targets)
        .fold(F::zero(), |acc, (&p, &w)| acc + bce(p, w)))
}

/// Gradient of [`ordinal_loss`] with respect to the prediction entries.
/// Zero where the clamp is active (the clamped loss is flat there).
pub fn ordinal_loss_grad<F: Scalar>(prediction: &[F], t: u8) -> Result<Vec<F>> {
    let y_max = prediction.len() as u8;
    let omega = ordinal_encode(t, y_max)?;
    let targets = omega.as_scalars::<F>();
    let lo = F::from(PROB_CLAMP).unwrap();
    let hi = F::one() - lo;
    Ok(prediction
        .iter()
        .zip(&targets)
        .map(|(&p, &w)| {
            if p <= lo || p >= hi {
                F::zero()
            } else {
                (p - w) / (p * (F::one() - p))
            }
        })
        .collect())
}

/// Combined per-list objective: `L_y(scores, labels) + alpha * L_t(d, t)`.
/// Batch-level aggregation (the mean over lists) lives in the training loop.
pub fn combined_objective<F: Scalar>(
    scores: &[F],
    labels: &[F],
    prediction: &[F],
    t: u8,
    alpha: F,
) -> Result<F> {
    let ranking = softmax_loss(scores, labels)?;
    if alpha == F::zero() {
        return Ok(ranking);
    }
    let listwide = ordinal_loss(prediction, t)?;
    Ok(ranking + alpha * listwide)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const LN_2: f64 = 0.693147180559945309;
    const LN_1P_E: f64 = 1.313261687518222834;

    #[test]
    fn softmax_loss_uniform_case() {
        let l = softmax_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l, LN_2, epsilon = 1e-15);
    }

    #[test]
    fn softmax_loss_zero_labels_is_exactly_zero() {
        let l = softmax_loss(&[3.1, -2.0, 0.7], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn softmax_loss_matches_high_precision_value() {
        // -log softmax((1,0))_2 = log(1+e)
        let l = softmax_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(l, LN_1P_E, epsilon = 1e-15);
    }

    #[test]
    fn softmax_loss_length_mismatch_errors() {
        assert!(softmax_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn listwide_label_cases() {
        assert_eq!(listwide_label(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(listwide_label(&[0, 2, 1]).unwrap(), 2);
        assert_eq!(listwide_label(&[1]).unwrap(), 1);
        assert!(listwide_label(&[]).is_err());
    }

    #[test]
    fn ordinal_encode_worked_examples() {
        assert_eq!(ordinal_encode(0, 2).unwrap().bits(), &[false, false]);
        assert_eq!(ordinal_encode(1, 2).unwrap().bits(), &[true, false]);
        assert_eq!(ordinal_encode(2, 2).unwrap().bits(), &[true, true]);
        assert!(ordinal_encode(3, 2).is_err());
    }

    #[test]
    fn ordinal_loss_symmetric_bce() {
        let l = ordinal_loss(&[0.5, 0.5], 2).unwrap();
        assert_abs_diff_eq!(l, 2.0 * LN_2, epsilon = 1e-15);
    }

    #[test]
    fn ordinal_loss_perfect_prediction_below_clamp_floor() {
        for t in 0..=2u8 {
            let d: Vec<f64> = ordinal_encode(t, 2).unwrap().as_scalars();
            let l = ordinal_loss(&d, t).unwrap();
            assert!(l <= 2.1e-7, "t={t}: {l}");
        }
    }

    #[test]
    fn ordinal_loss_matches_high_precision_value() {
        // -ln 0.9 - ln 0.9
        let l = ordinal_loss(&[0.9, 0.1], 1).unwrap();
        assert_abs_diff_eq!(l, 0.210721031315652602, epsilon = 1e-15);
    }

    #[test]
    fn combined_objective_alpha_zero_is_softmax_loss() {
        let s = [0.3, -1.0, 2.0];
        let y = [1.0, 0.0, 2.0];
        let c = combined_objective(&s, &y, &[0.5, 0.5], 2, 0.0).unwrap();
        assert_eq!(c, softmax_loss(&s, &y).unwrap());
    }

    #[test]
    fn combined_objective_component_sum() {
        // ln 2 + 2 ln 2 = 3 ln 2
        let c = combined_objective(&[0.0, 0.0], &[1.0, 0.0], &[0.5, 0.5], 2, 1.0).unwrap();
        assert_abs_diff_eq!(c, 3.0 * LN_2, epsilon = 1e-14);
    }

    #[test]
    fn combined_objective_zero_list_alpha_zero() {
        let c = combined_objective(&[1.0, 2.0], &[0.0, 0.0], &[0.5, 0.5], 0, 0.0).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn gradient_zero_iff_softmax_matches_normalized_labels() {
        // Constant label vector: stationary exactly when softmax(s) = y / sum(y).
        let y = [2.0, 2.0, 2.0];
        let g: Vec<f64> = softmax_loss_grad(&[5.0, 5.0, 5.0], &y).unwrap();
        for gi in g {
            assert_abs_diff_eq!(gi, 0.0, epsilon = 1e-12);
        }
        let g: Vec<f64> = softmax_loss_grad(&[5.0, 4.0, 5.0], &y).unwrap();
        assert!(g.iter().any(|gi| gi.abs() > 1e-3));
    }

    fn finite_diff_softmax_loss(s: &[f64], y: &[f64], i: usize, h: f64) -> f64 {
        let mut plus = s.to_vec();
        let mut minus = s.to_vec();
        plus[i] += h;
        minus[i] -= h;
        (softmax_loss(&plus, y).unwrap() - softmax_loss(&minus, y).unwrap()) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn translation_invariance(
            s in proptest::collection::vec(-5.0f64..5.0, 1..8),
            c in -10.0f64..10.0,
        ) {
            let y: Vec<f64> = (0..s.len()).map(|i| (i % 3) as f64).collect();
            let shifted: Vec<f64> = s.iter().map(|&v| v + c).collect();
            let a = softmax_loss(&s, &y).unwrap();
            let b = softmax_loss(&shifted, &y).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }

        #[test]
        fn permutation_equivariance(
            s in proptest::collection::vec(-5.0f64..5.0, 2..8),
            seed in 0u64..1000,
        ) {
            let y: Vec<f64> = (0..s.len()).map(|i| ((i * 7 + 1) % 3) as f64).collect();
            let n = s.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut state = seed;
            for i in (1..n).rev() {
                state = crate::rng::splitmix64(state);
                perm.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let sp: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let a = softmax_loss(&s, &y).unwrap();
            let b = softmax_loss(&sp, &yp).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn analytic_gradient_matches_finite_differences(
            s in proptest::collection::vec(-3.0f64..3.0, 2..6),
        ) {
            let y: Vec<f64> = (0..s.len()).map(|i| ((i + 1) % 3) as f64).collect();
            let g = softmax_loss_grad(&s, &y).unwrap();
            for i in 0..s.len() {
                let fd = finite_diff_softmax_loss(&s, &y, i, 1e-6);
                let denom = g[i].abs().max(fd.abs()).max(1e-6);
                prop_assert!((g[i] - fd).abs() / denom < 1e-6,
                    "i={i}: analytic {} vs fd {fd}", g[i]);
            }
        }

        #[test]
        fn ordinal_encoding_is_monotone(t in 0u8..=4, y_max in 1u8..=4) {
            prop_assume!(t <= y_max);
            let bits = ordinal_encode(t, y_max).unwrap();
            let b = bits.bits();
            for k in 1..b.len() {
                prop_assert!(!(b[k] && !b[k - 1]));
            }
            let d: Vec<f64> = bits.as_scalars();
            prop_assert!(ordinal_loss(&d, t).unwrap() < 1e-6);
        }
    }
}
