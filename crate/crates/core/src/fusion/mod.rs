//! Tri-modal fusion network: hyperparameters, segment batches, the model,
//! class-weighted training, and interview-level aggregation.

mod checkpoint;
mod layers;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{build_model, shape_summary, FusionModel, ShapePlan, FAU_FLAT, MFCC_FEATURES};
pub use train::{
    gradient_check, loss_and_grad, loss_on_batch, train, weighted_bce, weighted_bce_from_logits,
    EarlyStopping, EpochStats, GradCheckReport, TrainHistory, TrainOptions,
};

use crate::audiofeat::AugmentTag;
use crate::corpus::Label;
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use thiserror::Error;

/// Dense-head width ladder; `n_dense` takes a prefix of it.
pub const DENSE_LADDER: [usize; 6] = [256, 128, 64, 32, 16, 8];

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class weights need both classes present")]
    SingleClass,
    #[error("interview ids shared across partitions: {0:?}")]
    LeakageDetected(Vec<u32>),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("aggregation needs at least one probability")]
    EmptyInput,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("bad hyperparameters: {0}")]
    BadHyperparams(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Tunable architecture and training settings. The defaults are the tuned
/// result column: units 256/128/64, dropout 0.5/0.3/0.5, four dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionHyperparams {
    pub bilstm1_units: usize,
    pub dropout1: f64,
    pub bilstm2_units: usize,
    pub dropout2: f64,
    pub bilstm3_units: usize,
    pub dropout3: f64,
    pub n_dense: usize,
    /// Width of the post-concatenation fusion recurrence; continues the
    /// halving ladder.
    pub fusion_bilstm_units: usize,
    pub fusion_dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for FusionHyperparams {
    fn default() -> Self {
        FusionHyperparams {
            bilstm1_units: 256,
            dropout1: 0.5,
            bilstm2_units: 128,
            dropout2: 0.3,
            bilstm3_units: 64,
            dropout3: 0.5,
            n_dense: 4,
            fusion_bilstm_units: 64,
            fusion_dropout: 0.3,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

impl FusionHyperparams {
    /// The tuned configuration (equals `Default`).
    pub fn tuned_defaults() -> Self {
        Self::default()
    }

    pub fn dense_widths(&self) -> &'static [usize] {
        &DENSE_LADDER[..self.n_dense]
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.n_dense == 0 || self.n_dense > DENSE_LADDER.len() {
            return Err(FusionError::BadHyperparams(format!(
                "n_dense {} outside 1..={}",
                self.n_dense,
                DENSE_LADDER.len()
            )));
        }
        for (name, units) in [
            ("bilstm1_units", self.bilstm1_units),
            ("bilstm2_units", self.bilstm2_units),
            ("bilstm3_units", self.bilstm3_units),
            ("fusion_bilstm_units", self.fusion_bilstm_units),
        ] {
            if units == 0 {
                return Err(FusionError::BadHyperparams(format!("{name} must be positive")));
            }
        }
        for (name, rate) in [
            ("dropout1", self.dropout1),
            ("dropout2", self.dropout2),
            ("dropout3", self.dropout3),
            ("fusion_dropout", self.fusion_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(FusionError::BadHyperparams(format!("{name} {rate} outside [0, 1)")));
            }
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(FusionError::BadHyperparams("bad learning rate or batch size".into()));
        }
        Ok(())
    }

    /// Short content hash used in trial logs and config exports.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).expect("hyperparams serialize");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

/// One training sample: an (optionally augmented) 8 s segment with its
/// aligned FAU block, the interview's text verdict bit, and the label.
#[derive(Debug, Clone)]
pub struct SegmentSample {
    pub interview_id: u32,
    pub segment_index: usize,
    pub tag: AugmentTag,
    pub label: Label,
    pub llm_bit: f64,
    pub mfcc: Array2<f64>,
    pub fau: Array2<f64>,
}

/// An ordered collection of samples; batches are materialized on demand.
#[derive(Debug, Clone, Default)]
pub struct SegmentSet {
    pub samples: Vec<SegmentSample>,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn interview_ids(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.interview_id).collect()
    }

    pub fn t_frames(&self) -> Option<usize> {
        self.samples.first().map(|s| s.mfcc.nrows())
    }

    /// Materializes the rows at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> SegmentBatch {
        let b = indices.len();
        let (t, f) = self.samples[indices[0]].mfcc.dim();
        let (rows, cols) = self.samples[indices[0]].fau.dim();
        let mut mfcc = Array3::<f64>::zeros((b, t, f));
        let mut fau = Array3::<f64>::zeros((b, rows, cols));
        let mut llm = Array2::<f64>::zeros((b, 1));
        let mut labels = Array1::<f64>::zeros(b);
        let mut interview_ids = Vec::with_capacity(b);
        for (r, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            mfcc.index_axis_mut(Axis(0), r).assign(&s.mfcc);
            fau.index_axis_mut(Axis(0), r).assign(&s.fau);
            llm[(r, 0)] = s.llm_bit;
            labels[r] = s.label.as_bit();
            interview_ids.push(s.interview_id);
        }
        SegmentBatch { mfcc, fau, llm, labels, interview_ids }
    }

    pub fn full_batch(&self) -> SegmentBatch {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Swaps the text verdict bit on every sample (the text-branch ablation).
    pub fn flip_llm_bits(&self) -> SegmentSet {
        let samples = self
            .samples
            .iter()
            .map(|s| SegmentSample { llm_bit: 1.0 - s.llm_bit, ..s.clone() })
            .collect();
        SegmentSet { samples }
    }
}

/// A materialized minibatch.
#[derive(Debug, Clone)]
pub struct SegmentBatch {
    /// `[B x T x 60]`
    pub mfcc: Array3<f64>,
    /// `[B x 240 x 20]`
    pub fau: Array3<f64>,
    /// `[B x 1]` of {0, 1}
    pub llm: Array2<f64>,
    /// `[B]` of {0, 1}
    pub labels: Array1<f64>,
    pub interview_ids: Vec<u32>,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.interview_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interview_ids.is_empty()
    }

    /// The text verdict must be constant across all segments of one
    /// interview.
    pub fn validate_llm_consistency(&self) -> Result<(), FusionError> {
        let mut seen: std::collections::BTreeMap<u32, f64> = Default::default();
        for (r, &id) in self.interview_ids.iter().enumerate() {
            let bit = self.llm[(r, 0)];
            if bit != 0.0 && bit != 1.0 {
                return Err(FusionError::ShapeMismatch(format!(
                    "llm bit {bit} for interview {id} is not binary"
                )));
            }
            match seen.insert(id, bit) {
                Some(prev) if prev != bit => {
                    return Err(FusionError::ShapeMismatch(format!(
                        "llm bit varies within interview {id}"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Inverse-frequency class weights `w_c = N / (2 N_c)`; the minority class
/// gets the larger weight. Returned as `(w_not_depressed, w_depressed)`.
pub fn class_weights(labels: &[Label]) -> Result<(f64, f64), FusionError> {
    let n = labels.len() as f64;
    let n_pos = labels.iter().filter(|&&l| l == Label::Depressed).count() as f64;
    let n_neg = n - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(FusionError::SingleClass);
    }
    Ok((n / (2.0 * n_neg), n / (2.0 * n_pos)))
}

/// Mean-probability aggregation: an interview is depressed when the mean
/// of its segment probabilities reaches 0.5 (boundary inclusive). The mean
/// is the reported model confidence.
pub fn aggregate_interview(probs: &[f64]) -> Result<(Label, f64), FusionError> {
    if probs.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    let label = if mean >= 0.5 { Label::Depressed } else { Label::NotDepressed };
    Ok((label, mean))
}

/// Majority-vote aggregation, reported alongside the mean rule for
/// comparison. Ties go to depressed; the vote fraction doubles as a crude
/// confidence.
pub fn aggregate_majority(probs: &[f64]) -> Result<(Label, f64), FusionError> {
    if probs.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    let votes = probs.iter().filter(|&&p| p >= 0.5).count();
    let fraction = votes as f64 / probs.len() as f64;
    let label = if 2 * votes >= probs.len() { Label::Depressed } else { Label::NotDepressed };
    Ok((label, fraction))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weights_match_corpus_counts() {
        // 56 depressed / 133 not depressed.
        let mut labels = vec![Label::Depressed; 56];
        labels.extend(vec![Label::NotDepressed; 133]);
        let (w_neg, w_pos) = class_weights(&labels).unwrap();
        assert!((w_pos - 189.0 / 112.0).abs() < 1e-12);
        assert!((w_neg - 189.0 / 266.0).abs() < 1e-12);
        assert!((w_pos - 1.6875).abs() < 1e-4);
        assert!((w_neg - 0.7105).abs() < 1e-4);
        assert!(w_pos > w_neg);
    }

    #[test]
    fn balanced_labels_give_unit_weights() {
        let labels = vec![Label::Depressed, Label::NotDepressed];
        assert_eq!(class_weights(&labels).unwrap(), (1.0, 1.0));
        assert!(matches!(
            class_weights(&[Label::Depressed]),
            Err(FusionError::SingleClass)
        ));
    }

    #[test]
    fn mean_aggregation_and_boundary() {
        let (label, conf) = aggregate_interview(&[0.9, 0.8, 0.95]).unwrap();
        assert_eq!(label, Label::Depressed);
        assert!((conf - 0.8833333333333333).abs() < 1e-12);

        let (label, conf) = aggregate_interview(&[0.5]).unwrap();
        assert_eq!(label, Label::Depressed);
        assert_eq!(conf, 0.5);

        let (label, _) = aggregate_interview(&[0.2, 0.3]).unwrap();
        assert_eq!(label, Label::NotDepressed);
        assert!(matches!(aggregate_interview(&[]), Err(FusionError::EmptyInput)));
    }

    #[test]
    fn majority_vote_differs_from_mean_when_skewed() {
        // Two confident negatives, three weak positives.
        let probs = [0.05, 0.05, 0.6, 0.6, 0.6];
        let (mean_label, _) = aggregate_interview(&probs).unwrap();
        let (vote_label, frac) = aggregate_majority(&probs).unwrap();
        assert_eq!(mean_label, Label::NotDepressed);
        assert_eq!(vote_label, Label::Depressed);
        assert!((frac - 0.6).abs() < 1e-12);
    }

    #[test]
    fn llm_bit_must_be_constant_per_interview() {
        use ndarray::{Array1, Array2, Array3};
        let batch = SegmentBatch {
            mfcc: Array3::zeros((2, 4, 60)),
            fau: Array3::zeros((2, 240, 20)),
            llm: Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap(),
            labels: Array1::zeros(2),
            interview_ids: vec![5, 5],
        };
        assert!(matches!(
            batch.validate_llm_consistency(),
            Err(FusionError::ShapeMismatch(_))
        ));
        let ok = SegmentBatch { interview_ids: vec![5, 6], ..batch };
        assert!(ok.validate_llm_consistency().is_ok());
    }

    #[test]
    fn hyperparams_default_is_tuned_column_and_hash_is_stable() {
        let h = FusionHyperparams::default();
        assert_eq!(
            (h.bilstm1_units, h.dropout1, h.bilstm2_units, h.dropout2, h.bilstm3_units, h.dropout3, h.n_dense),
            (256, 0.5, 128, 0.3, 64, 0.5, 4)
        );
        assert_eq!(h.config_hash(), FusionHyperparams::tuned_defaults().config_hash());
        let other = FusionHyperparams { n_dense: 5, ..h };
        assert_ne!(other.config_hash(), FusionHyperparams::default().config_hash());
    }
}
