//! Threshold-free detection metrics.
//!
//! In-distribution samples are the positive class. Scores are oriented so that
//! larger means "more likely OOD"; a detector declares a sample IND when its
//! score is `<= τ`. Use [`ScoreDirection::LowerIsOod`] with [`evaluate`] for
//! scorers such as max-softmax probability.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// TPR operating point used by [`DetectionReport`].
pub const TPR_TARGET: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    HigherIsOod,
    LowerIsOod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auroc: f64,
    pub tnr_at_tpr95: f64,
    pub detection_accuracy: f64,
    pub n_ind: usize,
    pub n_ood: usize,
    /// In the units of the original scores.
    pub threshold_at_tpr95: f64,
}

fn check(ind: &[f64], ood: &[f64]) -> Result<()> {
    if ind.is_empty() || ood.is_empty() {
        return invalid(format!(
            "both score lists must be non-empty (got {} IND, {} OOD)",
            ind.len(),
            ood.len()
        ));
    }
    if ind.iter().chain(ood).any(|v| v.is_nan()) {
        return invalid("scores contain NaN");
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Pooled scores grouped by value: `(value, ind_count, ood_count)`, ascending.
fn groups(ind: &[f64], ood: &[f64]) -> Vec<(f64, u64, u64)> {
    let mut pooled: Vec<(f64, bool)> = ind
        .iter()
        .map(|&v| (v, false))
        .chain(ood.iter().map(|&v| (v, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    for (v, is_ood) in pooled {
        match out.last_mut() {
            Some(last) if last.0 == v => {
                if is_ood {
                    last.2 += 1
                } else {
                    last.1 += 1
                }
            }
            _ => out.push((v, u64::from(!is_ood), u64::from(is_ood))),
        }
    }
    out
}

/// Probability that a random OOD score exceeds a random IND score, ties
/// counted as one half (Mann-Whitney U / trapezoidal ROC area).
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<f64> {
    check(ind, ood)?;
    // counts doubled so half-credit for ties stays integral
    let mut twice_wins: u64 = 0;
    let mut ind_below: u64 = 0;
    for (_, n_ind, n_ood) in groups(ind, ood) {
        twice_wins += 2 * n_ood * ind_below + n_ood * n_ind;
        ind_below += n_ind;
    }
    Ok(twice_wins as f64 / (2.0 * ind.len() as f64 * ood.len() as f64))
}

/// TNR at the smallest threshold whose IND true-positive rate reaches
/// `tpr_target`. Returns `(tnr, threshold)`.
pub fn tnr_at_tpr(ind: &[f64], ood: &[f64], tpr_target: f64) -> Result<(f64, f64)> {
    check(ind, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return invalid(format!("TPR target must lie in (0, 1], got {tpr_target}"));
    }
    let s = sorted(ind);
    let n = s.len();
    let reaches = |k: usize| k as f64 / n as f64 >= tpr_target;
    let mut k = ((tpr_target * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && reaches(k - 1) {
        k -= 1;
    }
    while k < n && !reaches(k) {
        k += 1;
    }
    let tau = s[k - 1];
    let negatives = ood.iter().filter(|&&v| v > tau).count();
    Ok((negatives as f64 / ood.len() as f64, tau))
}

/// Best accuracy over all thresholds, including the two constant detectors.
pub fn detection_accuracy(ind: &[f64], ood: &[f64]) -> Result<f64> {
    check(ind, ood)?;
    let n_ood = ood.len() as u64;
    // τ = -inf: everything is called OOD
    let mut best = n_ood;
    let mut ind_le = 0u64;
    let mut ood_le = 0u64;
    for (_, a, b) in groups(ind, ood) {
        ind_le += a;
        ood_le += b;
        best = best.max(ind_le + (n_ood - ood_le));
    }
    Ok(best as f64 / (ind.len() + ood.len()) as f64)
}

/// All three metrics for one scorer.
pub fn evaluate(ind: &[f64], ood: &[f64], direction: ScoreDirection) -> Result<DetectionReport> {
    let flip = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let (ind_o, ood_o) = match direction {
        ScoreDirection::HigherIsOod => (ind.to_vec(), ood.to_vec()),
        ScoreDirection::LowerIsOod => (flip(ind), flip(ood)),
    };
    let (tnr, tau) = tnr_at_tpr(&ind_o, &ood_o, TPR_TARGET)?;
    Ok(DetectionReport {
        auroc: auroc(&ind_o, &ood_o)?,
        tnr_at_tpr95: tnr,
        detection_accuracy: detection_accuracy(&ind_o, &ood_o)?,
        n_ind: ind.len(),
        n_ood: ood.len(),
        threshold_at_tpr95: match direction {
            ScoreDirection::HigherIsOod => tau,
            ScoreDirection::LowerIsOod => -tau,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4], &[0.3, 0.9]).unwrap(), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn tnr_examples() {
        let (tnr, _) = tnr_at_tpr(&[0.1, 0.2], &[0.8, 0.9], 0.95).unwrap();
        assert_eq!(tnr, 1.0);
        let (tnr, tau) = tnr_at_tpr(&[0.1, 0.2, 0.3], &[0.25, 0.5, 0.9], 0.95).unwrap();
        assert_eq!(tau, 0.3);
        assert!((tnr - 2.0 / 3.0).abs() < 1e-15);
        let v: Vec<f64> = (0..100).map(|i| i as f64 * 0.37).collect();
        let (tnr, _) = tnr_at_tpr(&v, &v, 0.95).unwrap();
        assert!((tnr - 0.05).abs() < 1e-15);
        assert!(tnr_at_tpr(&v, &v, 0.0).is_err());
        assert!(tnr_at_tpr(&v, &v, 1.5).is_err());
        assert!(tnr_at_tpr(&[], &v, 0.95).is_err());
    }

    #[test]
    fn detection_accuracy_examples() {
        assert_eq!(detection_accuracy(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(detection_accuracy(&[0.1, 0.3], &[0.2, 0.4]).unwrap(), 0.75);
        let v = [0.3, 0.1, 0.7];
        assert_eq!(detection_accuracy(&v, &v).unwrap(), 0.5);
        assert_eq!(detection_accuracy(&[0.5; 3], &[0.5; 1]).unwrap(), 0.75);
        assert!(detection_accuracy(&[0.1], &[]).is_err());
    }

    #[test]
    fn evaluate_flips_orientation() {
        let ind = [0.9, 0.95, 0.8];
        let ood = [0.4, 0.6, 0.5];
        let r = evaluate(&ind, &ood, ScoreDirection::LowerIsOod).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.tnr_at_tpr95, 1.0);
        assert_eq!(r.detection_accuracy, 1.0);
        assert_eq!(r.threshold_at_tpr95, 0.8);
        assert_eq!((r.n_ind, r.n_ood), (3, 3));
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let h = evaluate(&neg(&ind), &neg(&ood), ScoreDirection::HigherIsOod).unwrap();
        assert_eq!(h.auroc, r.auroc);
        assert_eq!(h.threshold_at_tpr95, -r.threshold_at_tpr95);
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50i32..50, 1..40).prop_map(|v| v.into_iter().map(|x| x as f64 / 10.0).collect())
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_transform(ind in scores(), ood in scores()) {
            let f = |v: &[f64]| v.iter().map(|x| (x * 0.7).exp() + 3.0).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&ind, &ood).unwrap(), auroc(&f(&ind), &f(&ood)).unwrap());
        }

        #[test]
        fn auroc_swap_is_complement(ind in scores(), ood in scores()) {
            let a = auroc(&ind, &ood).unwrap();
            let b = auroc(&ood, &ind).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn accuracy_beats_constant_detector(ind in scores(), ood in scores()) {
            let acc = detection_accuracy(&ind, &ood).unwrap();
            let n = (ind.len() + ood.len()) as f64;
            prop_assert!(acc >= ind.len().max(ood.len()) as f64 / n - 1e-12);
            prop_assert!(acc <= 1.0);
        }
    }
}
