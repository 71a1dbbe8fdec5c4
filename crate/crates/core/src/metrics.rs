//! Imbalanced binary classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision threshold on sigmoid probabilities; a score `>= threshold` is
/// predicted fraud.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.r#fn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.r#fn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub f1_macro: f64,
    pub g_mean: f64,
    pub threshold: f64,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_lengths(scores, labels)?;
        Ok(Self {
            auc: auc(scores, labels)?,
            f1_macro: f1_macro(scores, labels, threshold),
            g_mean: g_mean(scores, labels, threshold),
            threshold,
            confusion: Confusion::from_scores(scores, labels, threshold),
        })
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// ROC AUC via the Mann–Whitney statistic with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their average
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean of the fraud-class and benign-class F1 scores at `threshold`.
pub fn f1_macro(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let c = Confusion::from_scores(scores, labels, threshold);
    let fraud = f1(c.tp, c.fp, c.r#fn);
    // benign as positive: its TP is our TN, its FP our FN, its FN our FP
    let benign = f1(c.tn, c.r#fn, c.fp);
    (fraud + benign) / 2.0
}

/// `sqrt(TPR * TNR)`; a rate with zero denominator counts as 0.
pub fn g_mean(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let c = Confusion::from_scores(scores, labels, threshold);
    let rate = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let tpr = rate(c.tp, c.tp + c.r#fn);
    let tnr = rate(c.tn, c.tn + c.fp);
    (tpr * tnr).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_perfect_and_ties() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auc_needs_both_classes() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_macro(&[0.9, 0.1, 0.7], &[1, 0, 1], 0.5), 1.0);
        // all predicted benign: fraud F1 = 0; benign F1 = 2*2/(2*2+2) = 2/3
        let v = f1_macro(&[0.1, 0.2, 0.3, 0.4], &[1, 1, 0, 0], 0.5);
        assert!((v - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn g_mean_cases() {
        assert_eq!(g_mean(&[0.9, 0.1], &[1, 0], 0.5), 1.0);
        // TPR = 1, TNR = 1/4
        let s = [0.9, 0.1, 0.9, 0.9, 0.9];
        assert_eq!(g_mean(&s, &[1, 0, 0, 0, 0], 0.5), 0.5);
        assert_eq!(g_mean(&[0.9, 0.9, 0.9], &[1, 0, 0], 0.5), 0.0);
        assert_eq!(g_mean(&[0.9], &[1], 0.5), 0.0);
    }

    #[test]
    fn report_confusion_sums() {
        let r = MetricsReport::compute(&[0.2, 0.6, 0.7, 0.4], &[0, 0, 1, 1], 0.5).unwrap();
        assert_eq!(r.confusion.total(), 4);
        assert_eq!(
            r.confusion,
            Confusion {
                tp: 1,
                fp: 1,
                tn: 1,
                r#fn: 1
            }
        );
    }

    proptest! {
        #[test]
        fn auc_complement(
            pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 7.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&scores, &flipped).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn threshold_metrics_depend_only_on_side(
            pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
            let snapped: Vec<f64> = scores.iter().map(|&s| if s >= 0.5 { 0.99 } else { 0.01 }).collect();
            prop_assert_eq!(f1_macro(&scores, &labels, 0.5), f1_macro(&snapped, &labels, 0.5));
            prop_assert_eq!(g_mean(&scores, &labels, 0.5), g_mean(&snapped, &labels, 0.5));
        }
    }
}
