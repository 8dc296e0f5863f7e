//! Positive-class (depressed = 1) classification metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_labels(truth: &[usize], predicted: &[usize]) -> Self {
        let mut c = Self::default();
        for (&y, &p) in truth.iter().zip(predicted) {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, _) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean with `0/0 = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn prf1(c: &ConfusionCounts) -> Prf1 {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Prf1 {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let p = prf1(&ConfusionCounts { tp: 8, fp: 2, tn: 0, fn_: 2 });
        assert!((p.precision - 0.8).abs() < 1e-15 && (p.recall - 0.8).abs() < 1e-15 && (p.f1 - 0.8).abs() < 1e-15);
        assert_eq!(prf1(&ConfusionCounts::default()), Prf1::default());
        assert!((f1_score(0.934, 0.954) - 0.944).abs() < 5e-4);
    }

    #[test]
    fn from_labels() {
        let c = ConfusionCounts::from_labels(&[1, 1, 0, 0, 1], &[1, 0, 1, 0, 1]);
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(c.total(), 5);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"fn\":1"));
    }

    proptest! {
        #[test]
        fn swapping_fp_fn_swaps_p_and_r(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
            let a = prf1(&ConfusionCounts { tp, fp, tn, fn_ });
            let b = prf1(&ConfusionCounts { tp, fp: fn_, tn, fn_: fp });
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a.f1));
        }
    }
}
