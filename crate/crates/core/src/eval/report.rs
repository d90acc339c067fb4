//! Evaluation reports: the pooled confusion matrix, metrics (for both
//! aggregation rules), and the per-interview prediction table; rendered as
//! structured text plus a machine-readable JSON metrics file.

use super::metrics::{ConfusionMatrix, MetricSet};
use crate::corpus::Label;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterviewPrediction {
    pub interview_id: u32,
    pub actual: Label,
    pub mean_probability: f64,
    pub mean_diagnosis: Label,
    pub majority_diagnosis: Label,
    pub n_segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    /// Mean-probability aggregation (the primary rule).
    pub matrix: ConfusionMatrix,
    pub metrics: MetricSet,
    /// Majority-vote aggregation, reported for comparison.
    pub majority_matrix: ConfusionMatrix,
    pub majority_metrics: MetricSet,
    pub rows: Vec<InterviewPrediction>,
}

fn metrics_json(s: &MetricSet) -> serde_json::Value {
    serde_json::json!({
        "precision_d": s.precision_d.percent(),
        "recall_d": s.recall_d.percent(),
        "f1_d": s.f1_d.percent(),
        "precision_nd": s.precision_nd.percent(),
        "recall_nd": s.recall_nd.percent(),
        "f1_nd": s.f1_nd.percent(),
        "accuracy": s.accuracy.percent(),
    })
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("protocol: {}\n", self.protocol));
        out.push_str(&format!("interviews evaluated: {}\n\n", self.rows.len()));
        out.push_str("mean-probability aggregation\n");
        out.push_str(&format!("{}\n", self.matrix));
        out.push_str(&format!(
            "accuracy {}  precision_d {}  recall_d {}  f1_d {}  precision_nd {}  recall_nd {}\n\n",
            self.metrics.accuracy,
            self.metrics.precision_d,
            self.metrics.recall_d,
            self.metrics.f1_d,
            self.metrics.precision_nd,
            self.metrics.recall_nd,
        ));
        out.push_str("majority-vote aggregation (comparison)\n");
        out.push_str(&format!("{}\n", self.majority_matrix));
        out.push_str(&format!(
            "accuracy {}  f1_d {}\n\n",
            self.majority_metrics.accuracy, self.majority_metrics.f1_d
        ));
        out.push_str("interview  actual         mean_prob  mean_diag      majority_diag  segments\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<9}  {:<13}  {:>8.4}  {:<13}  {:<13}  {:>8}\n",
                r.interview_id,
                r.actual.to_string(),
                r.mean_probability,
                r.mean_diagnosis.to_string(),
                r.majority_diagnosis.to_string(),
                r.n_segments
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "protocol": self.protocol,
            "matrix": self.matrix,
            "metrics": metrics_json(&self.metrics),
            "majority_matrix": self.majority_matrix,
            "majority_metrics": metrics_json(&self.majority_metrics),
            "interviews": self.rows,
        })
    }

    /// Writes `report.txt` and `metrics.json` into `dir`.
    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.render_text())?;
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&self.to_json()).expect("report serializes"),
        )
    }
}
