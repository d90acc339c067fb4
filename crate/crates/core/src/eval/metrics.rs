//! Interview-level confusion matrix and metrics.
//!
//! Metrics are exact rationals over the matrix counts; floating point only
//! appears at presentation (percentages rounded to two decimals, i.e. four
//! decimal places of the underlying ratio). Degenerate denominators are
//! reported as undefined, never as zero.

use super::EvalError;
use crate::corpus::Label;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

pub type Ratio64 = Ratio<u64>;

/// Counts with depressed as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionMatrix {
    pub const fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        ConfusionMatrix { true_pos, false_pos, false_neg, true_neg }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn from_predictions(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut m = ConfusionMatrix::new(0, 0, 0, 0);
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (Label::Depressed, Label::Depressed) => m.true_pos += 1,
                (Label::Depressed, Label::NotDepressed) => m.false_pos += 1,
                (Label::NotDepressed, Label::Depressed) => m.false_neg += 1,
                (Label::NotDepressed, Label::NotDepressed) => m.true_neg += 1,
            }
        }
        m
    }
}

impl std::fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "              actual D   actual ND")?;
        writeln!(f, "predicted D   {:8}   {:9}", self.true_pos, self.false_pos)?;
        write!(f, "predicted ND  {:8}   {:9}", self.false_neg, self.true_neg)
    }
}

/// One metric value; `None` means the defining denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Metric(Option<Ratio64>);

impl Metric {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Metric(None)
        } else {
            Metric(Some(Ratio::new(num, den)))
        }
    }

    pub fn value(&self) -> Option<Ratio64> {
        self.0
    }

    pub fn is_defined(&self) -> bool {
        self.0.is_some()
    }

    pub fn as_f64(&self) -> Option<f64> {
        self.0.map(|r| *r.numer() as f64 / *r.denom() as f64)
    }

    /// Percentage rounded to two decimals, the presentation precision.
    pub fn percent(&self) -> Option<f64> {
        self.as_f64().map(|v| (v * 10_000.0).round() / 100.0)
    }

    /// Strict accessor for callers that cannot tolerate undefined values.
    pub fn require(&self, name: &'static str) -> Result<Ratio64, EvalError> {
        self.0.ok_or(EvalError::DegenerateDenominator(name))
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.percent() {
            Some(p) => write!(f, "{p:.2}%"),
            None => write!(f, "undefined"),
        }
    }
}

/// Per-class precision/recall/F1 plus accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub precision_d: Metric,
    pub recall_d: Metric,
    pub f1_d: Metric,
    pub precision_nd: Metric,
    pub recall_nd: Metric,
    pub f1_nd: Metric,
    pub accuracy: Metric,
}

/// Exact metrics from the matrix:
/// `precision_d = tp/(tp+fp)`, `recall_d = tp/(tp+fn)`,
/// `f1_d = 2tp/(2tp+fp+fn)`, `accuracy = (tp+tn)/total`; the
/// not-depressed metrics are the mirror images.
pub fn compute_metrics(m: &ConfusionMatrix) -> MetricSet {
    let ConfusionMatrix { true_pos: tp, false_pos: fp, false_neg: fn_, true_neg: tn } = *m;
    MetricSet {
        precision_d: Metric::ratio(tp, tp + fp),
        recall_d: Metric::ratio(tp, tp + fn_),
        f1_d: Metric::ratio(2 * tp, 2 * tp + fp + fn_),
        precision_nd: Metric::ratio(tn, tn + fn_),
        recall_nd: Metric::ratio(tn, tn + fp),
        f1_nd: Metric::ratio(2 * tn, 2 * tn + fn_ + fp),
        accuracy: Metric::ratio(tp + tn, m.total()),
    }
}
