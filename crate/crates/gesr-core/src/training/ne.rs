//! Normalized entropy: average binary cross-entropy divided by the entropy
//! of the empirical label base rate.
//!
//! The normalization makes the number comparable across datasets with
//! different positive rates: a predictor that always outputs the base rate
//! scores exactly 1.0, and anything learning real signal lands below it.

use crate::error::{GesrError, Result};

/// Predictions are clipped into this band before taking logarithms, so a
/// saturated probability of exactly 0 or 1 stays finite.
pub const PRED_CLIP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Computes NE over paired probability predictions and binary labels.
///
/// Fails with `UndefinedMetric` when the labels are empty or single-class
/// (the base-rate entropy would be 0, so the ratio has no value), and with
/// `Input` on malformed predictions or labels.
pub fn ne_metric(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(GesrError::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(GesrError::UndefinedMetric(
            "no examples".to_string(),
        ));
    }
    let mut positives = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(GesrError::Input(format!(
                "label {y} at index {i} is not 0 or 1"
            )));
        }
        positives += (y == 1.0) as usize;
    }
    if positives == 0 || positives == labels.len() {
        return Err(GesrError::UndefinedMetric(format!(
            "labels are single-class ({positives} positives of {})",
            labels.len()
        )));
    }
    for (i, &p) in predictions.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(GesrError::Input(format!(
                "prediction {p} at index {i} is not a probability"
            )));
        }
    }

    let n = labels.len() as f64;
    let mut ce_sum = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(PRED_CLIP.0, PRED_CLIP.1);
        ce_sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    let base = positives as f64 / n;
    let base_entropy = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
    Ok(ce_sum / n / base_entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn base_rate_predictor_scores_exactly_one() {
        for labels in [
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0],
        ] {
            let base = labels.iter().sum::<f64>() / labels.len() as f64;
            let preds = vec![base; labels.len()];
            let ne = ne_metric(&preds, &labels).unwrap();
            assert!((ne - 1.0).abs() < 1e-9, "NE {ne} for base rate {base}");
        }
    }

    #[test]
    fn four_example_hand_case() {
        // labels [1,0,0,0], predictions [0.9,0.1,0.1,0.1]:
        // every example contributes -ln(0.9), so the mean cross-entropy is
        // -ln(0.9) = 0.10536051565782628. The base rate is 1/4 with entropy
        // -(0.25 ln 0.25 + 0.75 ln 0.75) = 0.5623351446188083.
        let ne = ne_metric(&[0.9, 0.1, 0.1, 0.1], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = 0.10536051565782628 / 0.5623351446188083;
        assert!((ne - expected).abs() < 1e-12, "NE {ne} vs {expected}");
        assert!((ne - 0.18736).abs() < 1e-5);
    }

    #[test]
    fn perfect_predictor_is_near_zero() {
        let labels = [1.0, 0.0, 0.0, 1.0, 0.0];
        let ne = ne_metric(&labels, &labels).unwrap();
        // Clipping turns ln(1) into ln(1 - 1e-7), so the value is tiny but
        // not exactly zero.
        assert!(ne > 0.0 && ne < 1e-5, "NE {ne}");
    }

    #[test]
    fn sharper_correct_predictions_score_lower() {
        let labels = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mild: Vec<f64> = labels.iter().map(|&y| 0.4 + 0.2 * y).collect();
        let sharp: Vec<f64> = labels.iter().map(|&y| 0.1 + 0.8 * y).collect();
        let ne_mild = ne_metric(&mild, &labels).unwrap();
        let ne_sharp = ne_metric(&sharp, &labels).unwrap();
        assert!(ne_sharp < ne_mild, "{ne_sharp} !< {ne_mild}");
    }

    #[test]
    fn saturated_probabilities_stay_finite() {
        let ne = ne_metric(&[1.0, 0.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(ne.is_finite());
        // The miss at index 2 is clipped to 1 - 1e-7 inside the log, giving
        // a large but bounded penalty.
        assert!(ne > 1.0);
    }

    #[test]
    fn single_class_labels_are_undefined() {
        for labels in [vec![1.0, 1.0, 1.0], vec![0.0], vec![]] {
            let preds = vec![0.5; labels.len()];
            let err = ne_metric(&preds, &labels).unwrap_err();
            assert!(matches!(err, GesrError::UndefinedMetric(_)), "{err}");
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(matches!(
            ne_metric(&[0.5], &[1.0, 0.0]).unwrap_err(),
            GesrError::Input(_)
        ));
        assert!(matches!(
            ne_metric(&[1.2, 0.5], &[1.0, 0.0]).unwrap_err(),
            GesrError::Input(_)
        ));
        assert!(matches!(
            ne_metric(&[f64::NAN, 0.5], &[1.0, 0.0]).unwrap_err(),
            GesrError::Input(_)
        ));
        assert!(matches!(
            ne_metric(&[0.5, 0.5], &[0.3, 1.0]).unwrap_err(),
            GesrError::Input(_)
        ));
    }

    proptest! {
        #[test]
        fn invariant_under_joint_permutation(
            pairs in proptest::collection::vec((0.001f64..0.999, prop::bool::ANY), 2..40),
            shuffle_seed in any::<u64>(),
        ) {
            let preds: Vec<f64> = pairs.iter().map(|(p, _)| *p).collect();
            let labels: Vec<f64> = pairs.iter().map(|(_, y)| f64::from(u8::from(*y))).collect();
            let positives = labels.iter().sum::<f64>();
            prop_assume!(positives > 0.0 && positives < labels.len() as f64);

            use rand::seq::SliceRandom as _;
            use rand::SeedableRng as _;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(shuffle_seed);
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
            let p2: Vec<f64> = order.iter().map(|&i| preds[i]).collect();
            let y2: Vec<f64> = order.iter().map(|&i| labels[i]).collect();

            let a = ne_metric(&preds, &labels).unwrap();
            let b = ne_metric(&p2, &y2).unwrap();
            // Identical up to float summation order; the sum is tiny, so the
            // bound is tight.
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        #[test]
        fn base_rate_is_one_for_any_mixed_labels(bits in proptest::collection::vec(prop::bool::ANY, 2..60)) {
            let labels: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
            let positives = labels.iter().sum::<f64>();
            prop_assume!(positives > 0.0 && positives < labels.len() as f64);
            let base = positives / labels.len() as f64;
            let ne = ne_metric(&vec![base; labels.len()], &labels).unwrap();
            prop_assert!((ne - 1.0).abs() < 1e-9);
        }
    }
}
