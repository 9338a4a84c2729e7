use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data_io::{SleepStage, NUM_STAGES};

/// Rows are the true stage, columns the predicted stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_STAGES]; NUM_STAGES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_STAGES]; NUM_STAGES]) -> Self {
        Self { counts }
    }

    pub fn from_pairs(truth: &[SleepStage], predicted: &[SleepStage]) -> Result<Self, EvalError> {
        if truth.len() != predicted.len() {
            return Err(EvalError::Mismatch(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new();
        for (t, p) in truth.iter().zip(predicted) {
            cm.add(*t, *p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: SleepStage, predicted: SleepStage) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for r in 0..NUM_STAGES {
            for c in 0..NUM_STAGES {
                self.counts[r][c] += other.counts[r][c];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Epochs of this class in the ground truth.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    /// Macro mean of one-vs-rest recall.
    pub sensitivity: f64,
    /// Macro mean of one-vs-rest true-negative rate.
    pub specificity: f64,
    /// Support-weighted one-vs-rest recall.
    pub weighted_sensitivity: f64,
    /// Support-weighted one-vs-rest true-negative rate.
    pub weighted_specificity: f64,
    pub per_class: [ClassMetrics; NUM_STAGES],
    pub n_epochs: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, Cohen's kappa, macro F1 and macro one-vs-rest sensitivity and
/// specificity. Undefined per-class ratios (zero denominators) count as 0, so
/// a class absent from both truth and prediction lowers the macro averages.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let n = total as f64;
    let row: Vec<u64> = (0..NUM_STAGES).map(|r| cm.counts[r].iter().sum()).collect();
    let col: Vec<u64> = (0..NUM_STAGES).map(|c| (0..NUM_STAGES).map(|r| cm.counts[r][c]).sum()).collect();
    let trace: u64 = (0..NUM_STAGES).map(|k| cm.counts[k][k]).sum();

    let p_o = trace as f64 / n;
    let p_e: f64 = (0..NUM_STAGES).map(|k| row[k] as f64 * col[k] as f64).sum::<f64>() / (n * n);
    let kappa = if p_e < 1.0 { (p_o - p_e) / (1.0 - p_e) } else { 1.0 };

    let per_class: [ClassMetrics; NUM_STAGES] = std::array::from_fn(|k| {
        let tp = cm.counts[k][k];
        let fn_ = row[k] - tp;
        let fp = col[k] - tp;
        let tn = total - tp - fn_ - fp;
        ClassMetrics {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            support: row[k],
        }
    });
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_STAGES as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / n;
    Ok(MetricsReport {
        accuracy: p_o,
        kappa,
        macro_f1: mean(|c| c.f1),
        sensitivity: mean(|c| c.recall),
        specificity: mean(|c| c.specificity),
        weighted_sensitivity: weighted(|c| c.recall),
        weighted_specificity: weighted(|c| c.specificity),
        per_class,
        n_epochs: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let mut counts = [[0; 5]; 5];
        for (k, row) in counts.iter_mut().enumerate() {
            row[k] = 10 + k as u64;
        }
        let m = compute_metrics(&ConfusionMatrix::from_counts(counts)).unwrap();
        for v in [m.accuracy, m.kappa, m.macro_f1, m.sensitivity, m.specificity] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn uniform_is_chance() {
        let m = compute_metrics(&ConfusionMatrix::from_counts([[7; 5]; 5])).unwrap();
        assert!((m.accuracy - 0.2).abs() < 1e-15);
        assert!(m.kappa.abs() < 1e-15);
    }

    #[test]
    fn absent_class_counts_as_zero_f1() {
        let mut counts = [[0; 5]; 5];
        for (k, row) in counts.iter_mut().enumerate().take(4) {
            row[k] = 5;
        }
        let m = compute_metrics(&ConfusionMatrix::from_counts(counts)).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!((m.macro_f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(compute_metrics(&ConfusionMatrix::new()), Err(EvalError::EmptyConfusion)));
    }
}
