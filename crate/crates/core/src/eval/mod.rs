//! Evaluation protocols: the fixed train/validation/test split and
//! leave-one-subject-out cross-validation, both with pooled
//! interview-level metrics and an explicit leakage audit.
//!
//! The audit is enforced, not assumed: every fold records exactly which
//! (interview, segment, tag) keys entered training, scaler fitting, and
//! testing, and `audit_folds` checks the no-leakage rules against those
//! records.

mod metrics;
mod reference;
mod report;

pub use metrics::{compute_metrics, ConfusionMatrix, Metric, MetricSet, Ratio64};
pub use reference::{
    check_reported, reference_consistency_report, Discrepancy, ReportedRow,
    REFERENCE_SINGLE_INTERVIEW_SECS, REPORTED_AVEC_MATRIX, REPORTED_AVEC_ROW,
    REPORTED_LOSOCV_MATRIX, REPORTED_LOSOCV_ROW, REPORT_TOLERANCE_POINTS,
};
pub use report::{EvalReport, InterviewPrediction};

use crate::audiofeat::AugmentTag;
use crate::corpus::Label;
use crate::fusion::{
    aggregate_interview, aggregate_majority, build_model, class_weights, train, FusionError,
    FusionHyperparams, SegmentSample, SegmentSet, TrainOptions,
};
use crate::visualfeat::{apply_fau_scaler, fit_fau_scaler, FauMatrix, FauScaler, VisualError};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric {0} has a zero denominator and is undefined")]
    DegenerateDenominator(&'static str),
    #[error("leakage detected: {0}")]
    LeakageDetected(String),
    #[error("cross-validation needs at least 3 interviews, got {0}")]
    InsufficientCorpus(usize),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("split sets overlap: {0}")]
    SplitOverlap(String),
    #[error("exemplar interviews present in the test split: {0:?}")]
    ExemplarInTest(Vec<u32>),
    #[error("split references interview {0} which is not in the corpus")]
    UnknownInterview(u32),
    #[error("interview {0} has no feature segments")]
    MissingFeatures(u32),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Disjoint interview-id sets for the fixed-split protocol.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitDefinition {
    pub train_ids: BTreeSet<u32>,
    pub validation_ids: BTreeSet<u32>,
    pub test_ids: BTreeSet<u32>,
}

impl SplitDefinition {
    pub fn new(
        train_ids: impl IntoIterator<Item = u32>,
        validation_ids: impl IntoIterator<Item = u32>,
        test_ids: impl IntoIterator<Item = u32>,
    ) -> Self {
        SplitDefinition {
            train_ids: train_ids.into_iter().collect(),
            validation_ids: validation_ids.into_iter().collect(),
            test_ids: test_ids.into_iter().collect(),
        }
    }

    /// Pairwise disjoint, non-empty where required, and no text-model
    /// exemplar id in the test set.
    pub fn validate(&self, exemplar_ids: &[u32]) -> Result<(), EvalError> {
        for (a, b, name) in [
            (&self.train_ids, &self.validation_ids, "train/validation"),
            (&self.train_ids, &self.test_ids, "train/test"),
            (&self.validation_ids, &self.test_ids, "validation/test"),
        ] {
            let shared: Vec<u32> = a.intersection(b).copied().collect();
            if !shared.is_empty() {
                return Err(EvalError::SplitOverlap(format!("{name}: {shared:?}")));
            }
        }
        if self.train_ids.is_empty() {
            return Err(EvalError::EmptySplit("train"));
        }
        if self.validation_ids.is_empty() {
            return Err(EvalError::EmptySplit("validation"));
        }
        if self.test_ids.is_empty() {
            return Err(EvalError::EmptySplit("test"));
        }
        let leaked: Vec<u32> =
            exemplar_ids.iter().copied().filter(|id| self.test_ids.contains(id)).collect();
        if !leaked.is_empty() {
            return Err(EvalError::ExemplarInTest(leaked));
        }
        Ok(())
    }

    /// Reads the three split CSVs (first column = participant id, header
    /// skipped), the layout the challenge split files use.
    pub fn load_csvs(train: &Path, validation: &Path, test: &Path) -> Result<Self, EvalError> {
        let read = |path: &Path| -> Result<BTreeSet<u32>, EvalError> {
            let text = std::fs::read_to_string(path)
                .map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
            Ok(text
                .lines()
                .skip(1)
                .filter_map(|l| l.split(',').next())
                .filter_map(|c| c.trim().parse().ok())
                .collect())
        };
        Ok(SplitDefinition {
            train_ids: read(train)?,
            validation_ids: read(validation)?,
            test_ids: read(test)?,
        })
    }
}

/// Prepared features for one interview: CMVN'd MFCC variants per
/// (segment, tag), the raw (unscaled) FAU block per segment, the text
/// verdict bit, and the label.
#[derive(Debug, Clone)]
pub struct SegmentFeature {
    pub segment_index: usize,
    pub tag: AugmentTag,
    pub mfcc: Array2<f64>,
    /// Unscaled: per-fold scalers are applied at collection time.
    pub fau_raw: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct InterviewFeatures {
    pub id: u32,
    pub label: Label,
    pub llm_bit: f64,
    pub segments: Vec<SegmentFeature>,
}

/// The evaluation corpus: everything the protocols need, with FAU scaling
/// deliberately deferred to per-partition fitting.
#[derive(Debug, Clone, Default)]
pub struct EvalDataset {
    pub interviews: Vec<InterviewFeatures>,
}

impl EvalDataset {
    pub fn ids(&self) -> Vec<u32> {
        self.interviews.iter().map(|iv| iv.id).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.interviews.iter().map(|iv| iv.label).collect()
    }

    pub fn t_frames(&self) -> Option<usize> {
        self.interviews.iter().find_map(|iv| iv.segments.first().map(|s| s.mfcc.nrows()))
    }

    pub fn get(&self, id: u32) -> Result<&InterviewFeatures, EvalError> {
        self.interviews
            .iter()
            .find(|iv| iv.id == id)
            .ok_or(EvalError::UnknownInterview(id))
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for iv in &self.interviews {
            if iv.segments.is_empty() {
                return Err(EvalError::MissingFeatures(iv.id));
            }
        }
        Ok(())
    }

}

/// Key identifying one feature row end to end; what the audit stores.
pub type SegmentKey = (u32, usize, AugmentTag);

/// Everything one fold touched; consumed by [`audit_folds`].
#[derive(Debug, Clone)]
pub struct FoldAudit {
    pub test_id: u32,
    pub train_ids: BTreeSet<u32>,
    pub val_ids: BTreeSet<u32>,
    pub train_segments: Vec<SegmentKey>,
    pub scaler_segments: Vec<SegmentKey>,
    pub test_segments: Vec<SegmentKey>,
}

/// Train/validation/test id plan for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub test_id: u32,
    pub val_ids: BTreeSet<u32>,
    pub train_ids: BTreeSet<u32>,
}

/// Deterministic per-fold plans: every interview is held out once; a small
/// seeded share of the remainder (at least one interview) becomes the
/// early-stopping monitor and the rest trains. The validation window is
/// rotated if necessary so the training partition keeps both classes
/// whenever the remainder allows it.
pub fn losocv_folds(interviews: &[(u32, Label)], seed: u64, val_fraction: f64) -> Vec<FoldPlan> {
    interviews
        .iter()
        .map(|&(test_id, _)| {
            let mut rest: Vec<(u32, Label)> =
                interviews.iter().copied().filter(|&(i, _)| i != test_id).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (test_id as u64) << 17);
            rest.shuffle(&mut rng);
            let n_val = ((rest.len() as f64 * val_fraction).round() as usize)
                .max(1)
                .min(rest.len().saturating_sub(1).max(1));

            let mut chosen = None;
            for offset in 0..rest.len() {
                let val: BTreeSet<u32> =
                    (0..n_val).map(|k| rest[(offset + k) % rest.len()].0).collect();
                let train_labels: BTreeSet<Label> = rest
                    .iter()
                    .filter(|(id, _)| !val.contains(id))
                    .map(|&(_, l)| l)
                    .collect();
                if train_labels.len() == 2 || offset == rest.len() - 1 {
                    chosen = Some(val);
                    break;
                }
            }
            let val_ids = chosen.expect("at least one window");
            let train_ids: BTreeSet<u32> = rest
                .iter()
                .map(|&(id, _)| id)
                .filter(|id| !val_ids.contains(id))
                .collect();
            FoldPlan { test_id, val_ids, train_ids }
        })
        .collect()
}

/// Verifies the no-leakage rules on recorded fold activity: no test-id
/// segment (any tag) in training or scaler fitting, and no augmented
/// segment in test evaluation.
pub fn audit_folds(audits: &[FoldAudit]) -> Result<(), EvalError> {
    for a in audits {
        for (id, idx, tag) in a.train_segments.iter().chain(&a.scaler_segments) {
            if *id == a.test_id {
                return Err(EvalError::LeakageDetected(format!(
                    "fold {}: segment ({id}, {idx}, {tag}) of the held-out interview entered training",
                    a.test_id
                )));
            }
        }
        for (id, idx, tag) in &a.test_segments {
            if !tag.is_original() {
                return Err(EvalError::LeakageDetected(format!(
                    "fold {}: augmented segment ({id}, {idx}, {tag}) appeared in test evaluation",
                    a.test_id
                )));
            }
        }
        for key in &a.scaler_segments {
            if !a.train_ids.contains(&key.0) {
                return Err(EvalError::LeakageDetected(format!(
                    "fold {}: scaler fitted on segment of non-training interview {}",
                    a.test_id, key.0
                )));
            }
        }
    }
    Ok(())
}

/// Protocol settings shared by both runs.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_epochs: usize,
    /// Share of training interviews held out per LOSOCV fold for early
    /// stopping.
    pub val_fraction: f64,
    /// Text-model exemplar interview ids; must not appear in any test set.
    pub exemplar_ids: Vec<u32>,
    /// Ablation: flip the text verdict bit at evaluation time only (models
    /// still train on the true bits). A global flip would be a no-op since
    /// retraining learns the inverted encoding; the evaluation-time flip
    /// measures how much the text branch carries.
    pub flip_test_llm: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_epochs: 30,
            val_fraction: 0.15,
            exemplar_ids: Vec::new(),
            flip_test_llm: false,
        }
    }
}

fn scaler_matrices(data: &EvalDataset, ids: &BTreeSet<u32>) -> (Vec<FauMatrix>, Vec<SegmentKey>) {
    let mut mats = Vec::new();
    let mut keys = Vec::new();
    for iv in &data.interviews {
        if !ids.contains(&iv.id) {
            continue;
        }
        for s in &iv.segments {
            // One FAU block per segment; the augmented variants share it, so
            // fitting on originals is exact and avoids 7x multiplicity.
            if s.tag.is_original() {
                mats.push(FauMatrix { values: s.fau_raw.clone() });
                keys.push((iv.id, s.segment_index, s.tag));
            }
        }
    }
    (mats, keys)
}

fn collect_set(
    data: &EvalDataset,
    ids: &BTreeSet<u32>,
    include_augmented: bool,
    scaler: &FauScaler,
) -> (SegmentSet, Vec<SegmentKey>) {
    let mut samples = Vec::new();
    let mut keys = Vec::new();
    for iv in &data.interviews {
        if !ids.contains(&iv.id) {
            continue;
        }
        for s in &iv.segments {
            if !include_augmented && !s.tag.is_original() {
                continue;
            }
            let fau = apply_fau_scaler(&FauMatrix { values: s.fau_raw.clone() }, scaler);
            samples.push(SegmentSample {
                interview_id: iv.id,
                segment_index: s.segment_index,
                tag: s.tag,
                label: iv.label,
                llm_bit: iv.llm_bit,
                mfcc: s.mfcc.clone(),
                fau: fau.values,
            });
            keys.push((iv.id, s.segment_index, s.tag));
        }
    }
    (SegmentSet { samples }, keys)
}

/// Scaler and segment sets for one training partition; what both protocols
/// (and the CLI train command) build before touching the model.
pub struct PartitionedSets {
    pub scaler: FauScaler,
    pub train: SegmentSet,
    pub validation: SegmentSet,
    pub train_keys: Vec<SegmentKey>,
    pub scaler_keys: Vec<SegmentKey>,
}

/// Fits the FAU scaler on the training ids only, then materializes the
/// training set (augmented variants included) and the validation set
/// (originals only), both scaled.
pub fn build_partitions(
    data: &EvalDataset,
    train_ids: &BTreeSet<u32>,
    val_ids: &BTreeSet<u32>,
) -> Result<PartitionedSets, EvalError> {
    let (scaler_mats, scaler_keys) = scaler_matrices(data, train_ids);
    let scaler = fit_fau_scaler(&scaler_mats)?;
    let (train, train_keys) = collect_set(data, train_ids, true, &scaler);
    let (validation, _) = collect_set(data, val_ids, false, &scaler);
    Ok(PartitionedSets { scaler, train, validation, train_keys, scaler_keys })
}

struct FoldOutcome {
    row: InterviewPrediction,
    audit: FoldAudit,
}

fn run_fold(
    data: &EvalDataset,
    plan: &FoldPlan,
    h: &FusionHyperparams,
    opts: &EvalOptions,
    fold_seed: u64,
) -> Result<FoldOutcome, EvalError> {
    let parts = build_partitions(data, &plan.train_ids, &plan.val_ids)?;
    let PartitionedSets { scaler, train: train_set, validation: val_set, train_keys, scaler_keys } =
        parts;
    let test_ids: BTreeSet<u32> = [plan.test_id].into_iter().collect();
    let (mut test_set, test_keys) = collect_set(data, &test_ids, false, &scaler);
    if test_set.is_empty() {
        return Err(EvalError::MissingFeatures(plan.test_id));
    }
    if opts.flip_test_llm {
        test_set = test_set.flip_llm_bits();
    }

    let weights = class_weights(&train_set.labels())?;
    let t_frames = train_set.t_frames().ok_or(EvalError::MissingFeatures(plan.test_id))?;
    let mut model = build_model(h, t_frames, fold_seed)?;
    let mut train_opts = TrainOptions::from_hyperparams(h, opts.max_epochs, fold_seed);
    train_opts.patience = 3;
    train(&mut model, &train_set, &val_set, weights, &train_opts)?;

    let batch = test_set.full_batch();
    let probs = model.predict(&batch)?;
    let probs: Vec<f64> = probs.to_vec();
    let (mean_diag, mean_prob) = aggregate_interview(&probs)?;
    let (majority_diag, _) = aggregate_majority(&probs)?;
    let actual = data.get(plan.test_id)?.label;

    Ok(FoldOutcome {
        row: InterviewPrediction {
            interview_id: plan.test_id,
            actual,
            mean_probability: mean_prob,
            mean_diagnosis: mean_diag,
            majority_diagnosis: majority_diag,
            n_segments: probs.len(),
        },
        audit: FoldAudit {
            test_id: plan.test_id,
            train_ids: plan.train_ids.clone(),
            val_ids: plan.val_ids.clone(),
            train_segments: train_keys,
            scaler_segments: scaler_keys,
            test_segments: test_keys,
        },
    })
}

fn pooled_report(protocol: &str, mut rows: Vec<InterviewPrediction>) -> EvalReport {
    rows.sort_by_key(|r| r.interview_id);
    let matrix =
        ConfusionMatrix::from_predictions(rows.iter().map(|r| (r.mean_diagnosis, r.actual)));
    let majority_matrix =
        ConfusionMatrix::from_predictions(rows.iter().map(|r| (r.majority_diagnosis, r.actual)));
    EvalReport {
        protocol: protocol.to_string(),
        metrics: compute_metrics(&matrix),
        matrix,
        majority_metrics: compute_metrics(&majority_matrix),
        majority_matrix,
        rows,
    }
}

/// Outcome of a cross-validation or split run, with the audit trail.
#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub fold_audits: Vec<FoldAudit>,
}

/// Leave-one-subject-out cross-validation: one freshly initialized model
/// per interview, trained on everyone else (augmented segments included),
/// tested on the held-out interview's original segments only, pooled into
/// one confusion matrix. Folds run in parallel; the pooled result is
/// deterministic in `seed`.
pub fn run_losocv(
    data: &EvalDataset,
    h: &FusionHyperparams,
    opts: &EvalOptions,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    data.validate()?;
    let ids = data.ids();
    if ids.len() < 3 {
        return Err(EvalError::InsufficientCorpus(ids.len()));
    }
    let exemplar_in_corpus: Vec<u32> =
        opts.exemplar_ids.iter().copied().filter(|id| ids.contains(id)).collect();
    if !exemplar_in_corpus.is_empty() {
        return Err(EvalError::ExemplarInTest(exemplar_in_corpus));
    }

    let pairs: Vec<(u32, Label)> =
        data.interviews.iter().map(|iv| (iv.id, iv.label)).collect();
    let folds = losocv_folds(&pairs, seed, opts.val_fraction);
    let outcomes: Vec<FoldOutcome> = folds
        .par_iter()
        .map(|plan| {
            let fold_seed = seed ^ (plan.test_id as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
            run_fold(data, plan, h, opts, fold_seed)
        })
        .collect::<Result<_, EvalError>>()?;

    let mut rows = Vec::with_capacity(outcomes.len());
    let mut fold_audits = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        rows.push(o.row);
        fold_audits.push(o.audit);
    }
    audit_folds(&fold_audits)?;
    Ok(EvalOutcome { report: pooled_report("losocv", rows), fold_audits })
}

/// Fixed-split evaluation: trains once on the train ids (augmented
/// included), early-stops on the validation ids, and evaluates
/// interview-level on the test ids (originals only).
pub fn run_avec(
    data: &EvalDataset,
    split: &SplitDefinition,
    h: &FusionHyperparams,
    opts: &EvalOptions,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    data.validate()?;
    split.validate(&opts.exemplar_ids)?;
    let known: BTreeSet<u32> = data.ids().into_iter().collect();
    for id in split.train_ids.iter().chain(&split.validation_ids).chain(&split.test_ids) {
        if !known.contains(id) {
            return Err(EvalError::UnknownInterview(*id));
        }
    }

    let parts = build_partitions(data, &split.train_ids, &split.validation_ids)?;
    let PartitionedSets { scaler, train: train_set, validation: val_set, train_keys, scaler_keys } =
        parts;

    let weights = class_weights(&train_set.labels())?;
    let t_frames = train_set.t_frames().ok_or(EvalError::EmptySplit("train"))?;
    let mut model = build_model(h, t_frames, seed)?;
    let mut train_opts = TrainOptions::from_hyperparams(h, opts.max_epochs, seed);
    train_opts.patience = 3;
    train(&mut model, &train_set, &val_set, weights, &train_opts)?;

    let mut rows = Vec::new();
    let mut test_keys = Vec::new();
    for &id in &split.test_ids {
        let ids: BTreeSet<u32> = [id].into_iter().collect();
        let (mut test_set, keys) = collect_set(data, &ids, false, &scaler);
        if test_set.is_empty() {
            return Err(EvalError::MissingFeatures(id));
        }
        if opts.flip_test_llm {
            test_set = test_set.flip_llm_bits();
        }
        test_keys.extend(keys);
        let probs: Vec<f64> = model.predict(&test_set.full_batch())?.to_vec();
        let (mean_diag, mean_prob) = aggregate_interview(&probs)?;
        let (majority_diag, _) = aggregate_majority(&probs)?;
        rows.push(InterviewPrediction {
            interview_id: id,
            actual: data.get(id)?.label,
            mean_probability: mean_prob,
            mean_diagnosis: mean_diag,
            majority_diagnosis: majority_diag,
            n_segments: probs.len(),
        });
    }

    let audit = FoldAudit {
        // The whole test split acts as one held-out block; audit each test
        // id against the recorded training keys.
        test_id: *split.test_ids.iter().next().expect("validated non-empty"),
        train_ids: split.train_ids.clone(),
        val_ids: split.validation_ids.clone(),
        train_segments: train_keys.clone(),
        scaler_segments: scaler_keys,
        test_segments: test_keys.clone(),
    };
    for id in &split.test_ids {
        if train_keys.iter().any(|k| k.0 == *id) {
            return Err(EvalError::LeakageDetected(format!(
                "test interview {id} has segments in the training set"
            )));
        }
    }
    for (_, _, tag) in &test_keys {
        if !tag.is_original() {
            return Err(EvalError::LeakageDetected("augmented segment in test".into()));
        }
    }
    Ok(EvalOutcome { report: pooled_report("avec", rows), fold_audits: vec![audit] })
}
