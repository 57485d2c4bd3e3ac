//! Inverse-frequency weighted losses, built as tape nodes so they
//! differentiate through the model.
//!
//! Frequent classes are cheap to get wrong and rare classes expensive: each
//! class weight is proportional to the inverse of its observed frequency.
//! Attribute targets are whatever the annotations say; labels missing from
//! an annotation are treated as negatives, which is exactly why the positive
//! term gets the weight (annotations are incomplete far more often than they
//! are wrong).

use crate::tensor::{Tape, Value};
use crate::{Error, Result};

/// Per-class positive weights for one level, normalized to mean 1.
///
/// The pre-normalization scale (the mean inverse frequency) is kept so
/// callers can recover the raw weights `1/f_c`; the attribute-level training
/// loss uses those to give rare labels absolute rather than merely relative
/// emphasis.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
    raw_scale: f64,
}

impl ClassWeights {
    fn build(frequencies: &[f64]) -> Result<Self> {
        assert!(!frequencies.is_empty(), "class_weights: no frequencies");
        for (i, &f) in frequencies.iter().enumerate() {
            if f <= 0.0 {
                return Err(Error::Data(format!(
                    "class {i} has zero frequency; drop the class or smooth \
                     its frequency before weighting"
                )));
            }
        }
        let inverse: Vec<f64> = frequencies.iter().map(|f| 1.0 / f).collect();
        let raw_scale = inverse.iter().sum::<f64>() / inverse.len() as f64;
        Ok(ClassWeights {
            weights: inverse.iter().map(|v| v / raw_scale).collect(),
            raw_scale,
        })
    }

    /// Weights for mutually exclusive classes; frequencies must form a
    /// distribution.
    pub fn from_multiclass(frequencies: &[f64]) -> Result<Self> {
        let total: f64 = frequencies.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "multiclass frequencies must sum to 1, got {total}"
            )));
        }
        Self::build(frequencies)
    }

    /// Weights for independent labels; each frequency is the fraction of
    /// products carrying the label and they need not sum to anything.
    pub fn from_label_frequencies(frequencies: &[f64]) -> Result<Self> {
        for (i, &f) in frequencies.iter().enumerate() {
            if f > 1.0 {
                return Err(Error::Data(format!(
                    "label {i} frequency {f} exceeds 1"
                )));
            }
        }
        Self::build(frequencies)
    }

    /// Mean-1 normalized weights, `(1/f_c) / mean_j(1/f_j)`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The mean inverse frequency divided out during normalization.
    pub fn raw_scale(&self) -> f64 {
        self.raw_scale
    }

    /// Unnormalized inverse frequencies `1/f_c`.
    pub fn raw(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w * self.raw_scale).collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weighted cross-entropy `-w_t * log p_t`, averaged over the batch.
/// Logs are clamped at 1e-12.
pub fn weighted_ce<'t>(
    tape: &'t Tape,
    probs: Value<'t>,
    targets: &[usize],
    weights: &[f64],
) -> Value<'t> {
    let shape = probs.shape();
    assert!(
        shape.len() == 2 && shape[0] == targets.len() && shape[1] == weights.len(),
        "weighted_ce: probs {shape:?} vs {} targets, {} weights",
        targets.len(),
        weights.len()
    );
    let (batch, classes) = (shape[0], shape[1]);
    let mut mask = vec![0.0; batch * classes];
    for (b, &t) in targets.iter().enumerate() {
        assert!(t < classes, "weighted_ce: target {t} out of {classes} classes");
        mask[b * classes + t] = weights[t] / batch as f64;
    }
    probs
        .log_clamped()
        .mul(tape.constant(shape, mask))
        .sum()
        .scale(-1.0)
}

/// Weighted binary cross-entropy over independent labels, averaged over
/// every (product, label) entry:
/// `-[w_l * t * log s  +  (1 - t) * log(1 - s)]`.
///
/// Weights apply to the positive term only; a label absent from the target
/// set contributes the plain negative term.
pub fn weighted_bce<'t>(
    tape: &'t Tape,
    scores: Value<'t>,
    target_sets: &[Vec<usize>],
    weights: &[f64],
) -> Value<'t> {
    let shape = scores.shape();
    assert!(
        shape.len() == 2 && shape[0] == target_sets.len() && shape[1] == weights.len(),
        "weighted_bce: scores {shape:?} vs {} targets, {} weights",
        target_sets.len(),
        weights.len()
    );
    let (batch, labels) = (shape[0], shape[1]);
    let denom = (batch * labels) as f64;
    let mut pos = vec![0.0; batch * labels];
    let mut neg = vec![1.0 / denom; batch * labels];
    for (b, set) in target_sets.iter().enumerate() {
        for &l in set {
            assert!(l < labels, "weighted_bce: label {l} out of {labels} labels");
            pos[b * labels + l] = weights[l] / denom;
            neg[b * labels + l] = 0.0;
        }
    }
    let positive_term = scores.log_clamped().mul(tape.constant(shape.clone(), pos));
    let complement = tape
        .constant(shape.clone(), vec![1.0; batch * labels])
        .add(scores.scale(-1.0));
    let negative_term = complement.log_clamped().mul(tape.constant(shape, neg));
    positive_term.add(negative_term).sum().scale(-1.0)
}

/// Equal-weight sum of the three level losses and the L2 penalty.
pub fn total_loss<'t>(
    l_cat: Value<'t>,
    l_sub: Value<'t>,
    l_attr: Value<'t>,
    l2: Value<'t>,
) -> Value<'t> {
    l_cat.add(l_sub).add(l_attr).add(l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn uniform_frequencies_give_unit_weights() {
        let w = ClassWeights::from_multiclass(&[0.25; 4]).unwrap();
        for v in w.weights() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert!((w.raw_scale() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn skewed_frequencies_match_hand_computation() {
        // 1/f = [1.25, 5], mean 3.125, so weights [0.4, 1.6].
        let w = ClassWeights::from_multiclass(&[0.8, 0.2]).unwrap();
        assert!((w.weights()[0] - 0.4).abs() < 1e-15);
        assert!((w.weights()[1] - 1.6).abs() < 1e-15);
        let raw = w.raw();
        assert!((raw[0] - 1.25).abs() < 1e-12 && (raw[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn weight_ratios_invert_frequency_ratios_and_mean_is_one() {
        let freqs = [0.5, 0.25, 0.15, 0.07, 0.03];
        let w = ClassWeights::from_multiclass(&freqs).unwrap();
        for a in 0..freqs.len() {
            for b in 0..freqs.len() {
                let ratio = w.weights()[a] / w.weights()[b];
                assert!((ratio - freqs[b] / freqs[a]).abs() < 1e-12);
            }
        }
        let mean: f64 = w.weights().iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_frequency_is_a_data_error() {
        let err = ClassWeights::from_label_frequencies(&[0.5, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class 1") && msg.contains("smooth"), "message was {msg}");
        assert!(ClassWeights::from_multiclass(&[0.5, 0.3]).is_err());
    }

    fn scores<'t>(tape: &'t Tape, rows: usize, cols: usize, data: &[f64]) -> Value<'t> {
        tape.leaf(&Tensor::new(vec![rows, cols], data.to_vec()).with_grad())
    }

    #[test]
    fn ce_is_zero_on_certainty_and_ln2_on_a_coin_flip() {
        let tape = Tape::new();
        let sure = scores(&tape, 1, 2, &[1.0, 0.0]);
        assert_eq!(weighted_ce(&tape, sure, &[0], &[1.0, 1.0]).item(), 0.0);

        let coin = scores(&tape, 1, 2, &[0.5, 0.5]);
        let l = weighted_ce(&tape, coin, &[0], &[1.0, 1.0]).item();
        assert!((l - LN2).abs() < 1e-12);
    }

    #[test]
    fn ce_is_linear_in_the_target_weight_and_batch_averaged() {
        let tape = Tape::new();
        let p = scores(&tape, 2, 2, &[0.5, 0.5, 0.25, 0.75]);
        let base = weighted_ce(&tape, p, &[0, 1], &[1.0, 1.0]).item();
        let doubled = weighted_ce(&tape, p, &[0, 1], &[2.0, 2.0]).item();
        assert!((doubled - 2.0 * base).abs() < 1e-12);
        // Hand average: (-ln 0.5 - ln 0.75) / 2.
        let expect = (LN2 - 0.75f64.ln()) / 2.0;
        assert!((base - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_with_uniform_weights_is_plain_cross_entropy() {
        let tape = Tape::new();
        let probs = [0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.2, 0.5, 0.3];
        let p = scores(&tape, 3, 3, &probs);
        let targets = [0usize, 1, 2];
        let plain: f64 = -(0.7f64.ln() + 0.6f64.ln() + 0.3f64.ln()) / 3.0;
        let l = weighted_ce(&tape, p, &targets, &[1.0; 3]).item();
        assert!((l - plain).abs() < 1e-12);
    }

    #[test]
    fn heavier_target_weight_strictly_increases_ce() {
        let tape = Tape::new();
        let p = scores(&tape, 1, 2, &[0.6, 0.4]);
        let mut last = 0.0;
        for step in 1..6 {
            let w = step as f64 * 0.5;
            let l = weighted_ce(&tape, p, &[0], &[w, 1.0]).item();
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn bce_perfect_scores_vanish() {
        let tape = Tape::new();
        let s = scores(&tape, 1, 3, &[1.0, 0.0, 1.0]);
        let l = weighted_bce(&tape, s, &[vec![0, 2]], &[1.0; 3]).item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn bce_coin_flip_positive_is_ln2() {
        let tape = Tape::new();
        let s = scores(&tape, 1, 1, &[0.5]);
        let l = weighted_bce(&tape, s, &[vec![0]], &[1.0]).item();
        assert!((l - LN2).abs() < 1e-12);
    }

    #[test]
    fn bce_weights_do_not_touch_negatives() {
        let tape = Tape::new();
        let s = scores(&tape, 2, 3, &[0.5; 6]);
        for weights in [[1.0; 3], [7.0, 0.1, 42.0]] {
            let l = weighted_bce(&tape, s, &[vec![], vec![]], &weights).item();
            assert!((l - LN2).abs() < 1e-12, "weights {weights:?} leaked into negatives");
        }
    }

    #[test]
    fn bce_positive_weight_scales_only_its_term() {
        let tape = Tape::new();
        let s = scores(&tape, 1, 2, &[0.5, 0.5]);
        let l1 = weighted_bce(&tape, s, &[vec![0]], &[1.0, 1.0]).item();
        let l3 = weighted_bce(&tape, s, &[vec![0]], &[3.0, 1.0]).item();
        // Entry (0,0) holds w * ln2 / 2, entry (0,1) holds ln2 / 2.
        assert!((l1 - LN2).abs() < 1e-12);
        assert!((l3 - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sums_and_commutes() {
        let tape = Tape::new();
        let parts: Vec<Value> = [0.0, 1.5, 0.25, 0.125]
            .iter()
            .map(|&v| tape.constant(vec![1], vec![v]))
            .collect();
        let zero = tape.constant(vec![1], vec![0.0]);
        assert_eq!(total_loss(zero, zero, zero, zero).item(), 0.0);
        let a = total_loss(parts[0], parts[1], parts[2], parts[3]).item();
        let b = total_loss(parts[2], parts[0], parts[1], parts[3]).item();
        assert_eq!(a, 1.875);
        assert_eq!(a, b);
    }

    #[test]
    fn total_gradient_is_the_sum_of_part_gradients() {
        // One parameter feeds two level losses; d(total)/dw must equal the
        // sum of the separate gradients.
        let grad_of = |combine: bool| {
            let tape = Tape::new();
            let w = tape.leaf(&Tensor::new(vec![1, 2], vec![0.3, -0.2]).with_grad());
            let p = w.softmax_rows();
            let ce = weighted_ce(&tape, p, &[0], &[1.0, 1.0]);
            let s = w.sigmoid();
            let bce = weighted_bce(&tape, s, &[vec![1]], &[1.0, 1.0]);
            let zero = tape.constant(vec![1], vec![0.0]);
            let grads = if combine {
                tape.backward(total_loss(ce, bce, zero, zero))
            } else {
                tape.backward(ce)
            };
            grads.wrt(w).to_vec()
        };
        let combined = grad_of(true);

        // Recompute the parts on separate tapes and add them.
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::new(vec![1, 2], vec![0.3, -0.2]).with_grad());
        let ce_only = tape.backward(weighted_ce(&tape, w.softmax_rows(), &[0], &[1.0, 1.0]));
        let tape2 = Tape::new();
        let w2 = tape2.leaf(&Tensor::new(vec![1, 2], vec![0.3, -0.2]).with_grad());
        let bce_only =
            tape2.backward(weighted_bce(&tape2, w2.sigmoid(), &[vec![1]], &[1.0, 1.0]));
        for i in 0..2 {
            let summed = ce_only.wrt(w)[i] + bce_only.wrt(w2)[i];
            assert!((combined[i] - summed).abs() < 1e-12);
        }
        let _ = grad_of(false);
    }
}
