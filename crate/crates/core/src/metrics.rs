//! Regression metrics (Spearman, MAE, MSE, R²) and the classification metrics
//! reported for the local-pattern model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], target: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < min_len {
        return Err(Error::Empty(format!(
            "need at least {min_len} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in metric input".into()));
    }
    Ok(())
}

/// Ranks from lowest (1) to highest (n); tied values share the mean of the
/// positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end (0-based) -> ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "correlation of a constant vector".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Tie-aware Spearman rank correlation: Pearson correlation of average ranks.
///
/// Without ties this equals `1 - 6 Σd² / (n(n²-1))`, see [`spearman_distinct`].
pub fn spearman(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 2)?;
    pearson(&average_ranks(pred), &average_ranks(target))
}

/// The rank-difference formula `1 - 6 Σd² / (n(n²-1))`. Only valid when
/// neither input has ties; returns an error otherwise.
pub fn spearman_distinct(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 2)?;
    let rp = average_ranks(pred);
    let rt = average_ranks(target);
    if rp.iter().chain(&rt).any(|r| r.fract() != 0.0) {
        return Err(Error::Input(
            "rank-difference formula requires tie-free inputs".into(),
        ));
    }
    let n = pred.len() as f64;
    let d2: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (t - p).abs()).sum();
    Ok(s / pred.len() as f64)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R² of a constant target".into()));
    }
    let ss_res: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub label: f64,
    pub prediction: f64,
}

/// Metric bundle over a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the predictions (or labels) are constant.
    pub spearman: Option<f64>,
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
    pub n: usize,
    pub samples: Vec<SamplePrediction>,
}

impl EvalReport {
    /// Computes all four metrics; `predictions` should already be clamped.
    pub fn from_predictions(samples: Vec<SamplePrediction>) -> Result<Self> {
        let pred: Vec<f64> = samples.iter().map(|s| s.prediction).collect();
        let target: Vec<f64> = samples.iter().map(|s| s.label).collect();
        Ok(EvalReport {
            spearman: match spearman(&pred, &target) {
                Ok(rho) => Some(rho),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            },
            mae: mae(&pred, &target)?,
            mse: mse(&pred, &target)?,
            r2: r2(&pred, &target)?,
            n: samples.len(),
            samples,
        })
    }
}

/// Per-class and averaged classification metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// Support-weighted averages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

/// Classification metrics for labels in `0..num_classes`.
///
/// Precision of a class that is never predicted is 0, as is F1 when both
/// precision and recall are 0.
pub fn classification_report(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<ClassificationReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != truth length {}",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Empty("classification metrics on an empty set".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Input(format!(
                "class index out of range 0..{num_classes}"
            )));
        }
        confusion[t][p] += 1;
    }
    let n = truth.len();
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();

    let mut weighted = [0.0f64; 3];
    let mut macro_sum = [0.0f64; 3];
    let mut present = 0usize;
    for k in 0..num_classes {
        let support: usize = confusion[k].iter().sum();
        let predicted_k: usize = (0..num_classes).map(|t| confusion[t][k]).sum();
        let tp = confusion[k][k] as f64;
        let precision = if predicted_k > 0 { tp / predicted_k as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let w = support as f64 / n as f64;
        weighted[0] += w * precision;
        weighted[1] += w * recall;
        weighted[2] += w * f1;
        // macro averages over classes present in the ground truth
        if support > 0 {
            present += 1;
            macro_sum[0] += precision;
            macro_sum[1] += recall;
            macro_sum[2] += f1;
        }
    }
    let present = present.max(1) as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / n as f64,
        precision: weighted[0],
        recall: weighted[1],
        f1: weighted[2],
        macro_precision: macro_sum[0] / present,
        macro_recall: macro_sum[1] / present,
        macro_f1: macro_sum[2] / present,
        confusion,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn spearman_identity_and_reversal() {
        let t = [0.3, 1.2, 2.5, 4.0, 9.0];
        assert_abs_diff_eq!(spearman(&t, &t).unwrap(), 1.0, epsilon = 1e-15);
        let r: Vec<f64> = t.iter().rev().copied().collect();
        assert_abs_diff_eq!(spearman(&r, &t).unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn spearman_hand_fixture() {
        // d = [0, 1, 1, 0] -> 1 - 6*2/(4*15) = 0.8
        let p = [1.0, 2.0, 3.0, 4.0];
        let t = [1.0, 3.0, 2.0, 4.0];
        assert_abs_diff_eq!(spearman(&p, &t).unwrap(), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman_distinct(&p, &t).unwrap(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn spearman_constant_is_undefined() {
        let err = spearman(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Undefined(_)));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn spearman_distinct_rejects_ties() {
        assert!(spearman_distinct(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn mae_mse_r2_fixtures() {
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mse(&[0.0], &[2.0]).unwrap(), 4.0);
        // SS_res = 1, SS_tot = 14/3
        let r = r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(r, 1.0 - 3.0 / 14.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.7857142857, epsilon = 1e-9);
    }

    #[test]
    fn r2_mean_predictor_is_zero() {
        let t = [1.0, 2.5, 3.0, 4.5];
        let m = t.iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(r2(&[m; 4], &t).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert!(matches!(r2(&t, &[2.0; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(mse(&[], &[]), Err(Error::Empty(_))));
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(mse(&[f64::NAN], &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn report_on_perfect_predictions() {
        let samples = (0..6)
            .map(|i| SamplePrediction {
                id: format!("c{i}"),
                label: 1.0 + 0.5 * i as f64,
                prediction: 1.0 + 0.5 * i as f64,
            })
            .collect();
        let r = EvalReport::from_predictions(samples).unwrap();
        assert_eq!((r.spearman, r.mae, r.mse, r.r2, r.n), (Some(1.0), 0.0, 0.0, 1.0, 6));
    }

    #[test]
    fn report_on_constant_predictions_has_no_spearman() {
        let samples = (0..4)
            .map(|i| SamplePrediction { id: format!("c{i}"), label: 1.0 + i as f64, prediction: 3.0 })
            .collect();
        let r = EvalReport::from_predictions(samples).unwrap();
        assert_eq!(r.spearman, None);
        assert!(r.mse > 0.0);
    }

    #[test]
    fn classification_perfect_and_chance() {
        let truth: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let r = classification_report(&truth, &truth, 5).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));

        let constant = vec![0usize; 50];
        let r = classification_report(&constant, &truth, 5).unwrap();
        assert_abs_diff_eq!(r.accuracy, 0.2, epsilon = 1e-15);
        assert!(classification_report(&[], &[], 5).is_err());
    }

    #[test]
    fn classification_hand_computed_confusion() {
        // 10 examples over 3 classes.
        // truth:     0 0 0 0 1 1 1 2 2 2
        // predicted: 0 0 1 2 1 1 0 2 2 2
        let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let pred = [0, 0, 1, 2, 1, 1, 0, 2, 2, 2];
        let r = classification_report(&pred, &truth, 3).unwrap();
        assert_eq!(r.confusion, vec![vec![2, 1, 1], vec![1, 2, 0], vec![0, 0, 3]]);
        // class 0: P = 2/3, R = 2/4, F1 = 4/7
        // class 1: P = 2/3, R = 2/3, F1 = 2/3
        // class 2: P = 3/4, R = 1,   F1 = 6/7
        assert_abs_diff_eq!(r.accuracy, 0.7, epsilon = 1e-15);
        let wp = 0.4 * (2.0 / 3.0) + 0.3 * (2.0 / 3.0) + 0.3 * 0.75;
        let wr = 0.4 * 0.5 + 0.3 * (2.0 / 3.0) + 0.3 * 1.0;
        let wf = 0.4 * (4.0 / 7.0) + 0.3 * (2.0 / 3.0) + 0.3 * (6.0 / 7.0);
        assert_abs_diff_eq!(r.precision, wp, epsilon = 1e-12);
        assert_abs_diff_eq!(r.recall, wr, epsilon = 1e-12);
        assert_abs_diff_eq!(r.f1, wf, epsilon = 1e-12);
        let mf = (4.0 / 7.0 + 2.0 / 3.0 + 6.0 / 7.0) / 3.0;
        assert_abs_diff_eq!(r.macro_f1, mf, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn spearman_matches_rank_formula_without_ties(
            perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
            scale in 0.1f64..10.0,
        ) {
            let target: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 + 1.0).collect();
            let pred: Vec<f64> = perm.iter().map(|&i| scale * i as f64 - 3.0).collect();
            let a = spearman(&pred, &target).unwrap();
            let b = spearman_distinct(&pred, &target).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn spearman_invariant_under_monotone_transform(
            xs in prop::collection::vec(-5.0f64..5.0, 3..30),
            ys in prop::collection::vec(-5.0f64..5.0, 30),
        ) {
            let ys = &ys[..xs.len()];
            if let Ok(a) = spearman(&xs, ys) {
                let tx: Vec<f64> = xs.iter().map(|v| v.exp()).collect();
                let ty: Vec<f64> = ys.iter().map(|v| 3.0 * v.powi(3) + 1.0).collect();
                let b = spearman(&tx, &ty).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_invariant_under_joint_permutation(
            pairs in prop::collection::vec((1.0f64..5.0, 1.0f64..5.0), 3..25),
            seed in any::<u64>(),
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            let mut s = seed;
            for i in (1..idx.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                idx.swap(i, (s >> 33) as usize % (i + 1));
            }
            let pp: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let tp: Vec<f64> = idx.iter().map(|&i| target[i]).collect();
            prop_assert!((mae(&pred, &target).unwrap() - mae(&pp, &tp).unwrap()).abs() < 1e-12);
            prop_assert!((mse(&pred, &target).unwrap() - mse(&pp, &tp).unwrap()).abs() < 1e-12);
            if let (Ok(a), Ok(b)) = (r2(&pred, &target), r2(&pp, &tp)) {
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!(a <= 1.0);
            }
            if let (Ok(a), Ok(b)) = (spearman(&pred, &target), spearman(&pp, &tp)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn mae_bounded_by_root_mse(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40),
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assert!(mae(&pred, &target).unwrap() <= mse(&pred, &target).unwrap().sqrt() + 1e-12);
        }
    }
}
