//! Stage orchestration: raw interview -> normalized transcript -> aligned
//! audio/visual features -> text verdict -> fused diagnosis -> clinical
//! report. Errors carry the pipeline stage they occurred in so job records
//! can attribute failures.

use crate::audiofeat::{
    cmvn, extract_mfcc, make_augmented_set_with, segment_patient_audio, AudioError,
};
use crate::config::{BackendKind, PipelineConfig};
use crate::corpus::{CorpusError, Interview, Label};
use crate::eval::{EvalDataset, EvalError, InterviewFeatures, SegmentFeature};
use crate::fusion::{
    aggregate_interview, Checkpoint, FusionError, FusionModel, SegmentSample, SegmentSet,
};
use crate::llm::{
    build_prompt, ChatBackend, ClinicalReport, Exemplar, ExemplarSet, LlmClient, LlmError,
    LlmVerdict, ResponseCache, StubBackend,
};
use crate::store::StoreError;
use crate::transcript::{render_dialogue, AcronymTable, Normalizer, TranscriptError};
use crate::visualfeat::{apply_fau_scaler, segment_patient_fau, FauMatrix, FauScaler, VisualError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Pipeline stages, in execution order; also the job-state ladder of the
/// inference service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocessing,
    Features,
    Llm,
    Inference,
    Reporting,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Preprocessing => "preprocessing",
            Stage::Features => "features",
            Stage::Llm => "llm",
            Stage::Inference => "inference",
            Stage::Reporting => "reporting",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("preprocessing: {0}")]
    Corpus(#[from] CorpusError),
    #[error("preprocessing: {0}")]
    Transcript(#[from] TranscriptError),
    #[error("features: {0}")]
    Audio(#[from] AudioError),
    #[error("features: {0}")]
    Visual(#[from] VisualError),
    #[error("llm: {0}")]
    Llm(#[from] LlmError),
    #[error("inference: {0}")]
    Fusion(#[from] FusionError),
    #[error("features: {0}")]
    Store(#[from] StoreError),
    #[error("inference: {0}")]
    Eval(#[from] EvalError),
    #[error("features: interview {id} has only {secs:.1} s of patient speech, no full segment")]
    TooLittleSpeech { id: u32, secs: f64 },
    #[error("inference: checkpoint metadata is missing {0}")]
    BadCheckpointMetadata(&'static str),
}

impl PipelineError {
    /// Stage attribution for job records.
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Corpus(_) | PipelineError::Transcript(_) => Stage::Preprocessing,
            PipelineError::Audio(_)
            | PipelineError::Visual(_)
            | PipelineError::Store(_)
            | PipelineError::TooLittleSpeech { .. } => Stage::Features,
            PipelineError::Llm(_) => Stage::Llm,
            PipelineError::Fusion(_)
            | PipelineError::Eval(_)
            | PipelineError::BadCheckpointMetadata(_) => Stage::Inference,
        }
    }
}

/// One interview's prepared features plus its rendered dialogue.
#[derive(Debug, Clone)]
pub struct PreparedInterview {
    pub id: u32,
    pub label: Label,
    pub dialogue: String,
    pub segments: Vec<SegmentFeature>,
    pub patient_secs: f64,
}

/// Runs transcript normalization, patient-audio segmentation, seven-fold
/// augmentation, MFCC + CMVN, and FAU alignment for one interview.
/// Augmentation draws are seeded per (seed, interview, segment).
pub fn prepare_interview(
    interview: &Interview,
    acronyms: &AcronymTable,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PreparedInterview, PipelineError> {
    let normalizer = Normalizer::rule_based(acronyms.clone());
    let normalized = normalizer.normalize_transcript(&interview.utterances)?;
    let dialogue = render_dialogue(&normalized);
    let working = Interview { utterances: normalized, ..interview.clone() };

    let audio = segment_patient_audio(&working)?;
    if audio.segments.is_empty() {
        return Err(PipelineError::TooLittleSpeech {
            id: interview.id,
            secs: working.patient_speech_secs(),
        });
    }
    let fau_blocks = segment_patient_fau(&working, &audio.spans)?;

    let mut segments = Vec::new();
    for (k, (waveform, fau)) in audio.segments.iter().zip(fau_blocks.iter()).enumerate() {
        let seg_seed = seed
            ^ (interview.id as u64).wrapping_mul(0xA24B_AED4_963E_E407)
            ^ (k as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25);
        for (variant, tag) in
            make_augmented_set_with(waveform, seg_seed, cfg.augment.noise_amplitude)
        {
            let mfcc = cmvn(&extract_mfcc(&variant, &cfg.mfcc)?)?;
            segments.push(SegmentFeature {
                segment_index: k,
                tag,
                mfcc: mfcc.values,
                fau_raw: fau.values.clone(),
            });
        }
    }
    Ok(PreparedInterview {
        id: interview.id,
        label: interview.label,
        dialogue,
        segments,
        patient_secs: working.patient_speech_secs(),
    })
}

/// Builds the few-shot exemplar set from corpus interviews (two per class).
pub fn exemplars_from_interviews(
    interviews: &[Interview],
    acronyms: &AcronymTable,
) -> Result<ExemplarSet, PipelineError> {
    let normalizer = Normalizer::rule_based(acronyms.clone());
    let mut exemplars = Vec::new();
    for iv in interviews {
        let normalized = normalizer.normalize_transcript(&iv.utterances)?;
        exemplars.push(Exemplar {
            interview_id: iv.id,
            dialogue: render_dialogue(&normalized),
            label: iv.label,
        });
    }
    Ok(ExemplarSet::new(exemplars)?)
}

/// Builds the chat backend named by the configuration. The remote backend
/// lives in the application crate; the library side knows the stub.
pub fn stub_backend_from_config(cfg: &PipelineConfig) -> StubBackend {
    StubBackend { markers: cfg.llm.markers.clone() }
}

/// Assembles the LLM client (backend + optional cache).
pub fn llm_client(backend: Box<dyn ChatBackend>, cfg: &PipelineConfig) -> Result<LlmClient, LlmError> {
    let mut client = LlmClient::new(backend);
    if !cfg.llm.cache_dir.is_empty() {
        client = client.with_cache(ResponseCache::new(&cfg.llm.cache_dir)?);
    }
    Ok(client)
}

/// Classifies one prepared interview's dialogue.
pub fn classify_dialogue(
    client: &LlmClient,
    interview_id: u32,
    dialogue: &str,
    exemplars: &ExemplarSet,
) -> Result<LlmVerdict, PipelineError> {
    let bundle = build_prompt(interview_id, dialogue, exemplars)?;
    Ok(client.classify(&bundle)?)
}

/// Prepares a whole corpus into an evaluation dataset: features for every
/// interview plus one cached text verdict each. Exemplar interviews must
/// not be part of `interviews`.
pub fn prepare_dataset(
    interviews: &[Interview],
    acronyms: &AcronymTable,
    exemplars: &ExemplarSet,
    client: &LlmClient,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<EvalDataset, PipelineError> {
    let exemplar_ids = exemplars.interview_ids();
    let mut out = Vec::with_capacity(interviews.len());
    for iv in interviews {
        if exemplar_ids.contains(&iv.id) {
            return Err(PipelineError::Eval(EvalError::ExemplarInTest(vec![iv.id])));
        }
        let prepared = prepare_interview(iv, acronyms, cfg, seed)?;
        let verdict = classify_dialogue(client, iv.id, &prepared.dialogue, exemplars)?;
        out.push(InterviewFeatures {
            id: prepared.id,
            label: prepared.label,
            llm_bit: verdict.diagnosis.as_bit(),
            segments: prepared.segments,
        });
    }
    Ok(EvalDataset { interviews: out })
}

/// What inference needs beyond the network weights; stored in the
/// checkpoint metadata so a single file drives `process_recording`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceMetadata {
    pub mfcc: crate::audiofeat::MfccConfig,
    pub noise_amplitude: f32,
    pub scaler: FauScaler,
    pub exemplars: ExemplarSet,
}

/// A restored checkpoint ready to classify recordings.
pub struct InferenceArtifacts {
    pub model: FusionModel,
    pub metadata: InferenceMetadata,
}

impl InferenceArtifacts {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PipelineError> {
        let metadata: InferenceMetadata = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|_| PipelineError::BadCheckpointMetadata("inference metadata"))?;
        Ok(InferenceArtifacts { model: ckpt.restore()?, metadata })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let ckpt = crate::fusion::load_checkpoint(path)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Per-stage wall-clock seconds of one end-to-end run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<(String, f64)>,
    pub total_secs: f64,
}

/// Runs the full pipeline on one interview: preprocess, features, text
/// verdict, fused inference, report generation. Only the interview's
/// original (unaugmented) segments drive the diagnosis.
pub fn process_recording(
    interview: &Interview,
    artifacts: &InferenceArtifacts,
    client: &LlmClient,
    acronyms: &AcronymTable,
) -> Result<(ClinicalReport, StageTimings), PipelineError> {
    process_recording_with(interview, artifacts, client, acronyms, &mut |_| {})
}

/// [`process_recording`] with a stage-entry callback, used by the inference
/// service to advance job state.
pub fn process_recording_with(
    interview: &Interview,
    artifacts: &InferenceArtifacts,
    client: &LlmClient,
    acronyms: &AcronymTable,
    on_stage: &mut dyn FnMut(Stage),
) -> Result<(ClinicalReport, StageTimings), PipelineError> {
    let mut stages = Vec::new();
    let t0 = Instant::now();

    // Preprocessing + features share prepare_interview; attribute the split
    // by re-timing the transcript step alone.
    on_stage(Stage::Preprocessing);
    let t = Instant::now();
    let normalizer = Normalizer::rule_based(acronyms.clone());
    let _ = normalizer.normalize_transcript(&interview.utterances)?;
    stages.push(("preprocessing".to_string(), t.elapsed().as_secs_f64()));

    on_stage(Stage::Features);
    let t = Instant::now();
    let cfg = PipelineConfig {
        mfcc: artifacts.metadata.mfcc,
        augment: crate::config::AugmentSettings {
            noise_amplitude: artifacts.metadata.noise_amplitude,
        },
        ..PipelineConfig::default()
    };
    let prepared = prepare_interview(interview, acronyms, &cfg, 0)?;
    stages.push(("features".to_string(), t.elapsed().as_secs_f64()));

    on_stage(Stage::Llm);
    let t = Instant::now();
    let verdict =
        classify_dialogue(client, interview.id, &prepared.dialogue, &artifacts.metadata.exemplars)?;
    stages.push(("llm".to_string(), t.elapsed().as_secs_f64()));

    on_stage(Stage::Inference);
    let t = Instant::now();
    let samples: Vec<SegmentSample> = prepared
        .segments
        .iter()
        .filter(|s| s.tag.is_original())
        .map(|s| SegmentSample {
            interview_id: prepared.id,
            segment_index: s.segment_index,
            tag: s.tag,
            label: prepared.label,
            llm_bit: verdict.diagnosis.as_bit(),
            mfcc: s.mfcc.clone(),
            fau: apply_fau_scaler(
                &FauMatrix { values: s.fau_raw.clone() },
                &artifacts.metadata.scaler,
            )
            .values,
        })
        .collect();
    let set = SegmentSet { samples };
    let probs: Vec<f64> = artifacts.model.predict(&set.full_batch())?.to_vec();
    let (_, confidence) = aggregate_interview(&probs)?;
    stages.push(("inference".to_string(), t.elapsed().as_secs_f64()));

    on_stage(Stage::Reporting);
    let t = Instant::now();
    let fused_verdict = LlmVerdict {
        diagnosis: if confidence >= 0.5 { Label::Depressed } else { Label::NotDepressed },
        ..verdict
    };
    let report = client.generate_report(&prepared.dialogue, &fused_verdict, confidence)?;
    stages.push(("reporting".to_string(), t.elapsed().as_secs_f64()));

    Ok((report, StageTimings { stages, total_secs: t0.elapsed().as_secs_f64() }))
}

/// Informational single-interview timing report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub interview_id: u32,
    pub timings: StageTimings,
    /// Previously reported wall time on reference hardware, for context.
    pub reference_secs: f64,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut out = format!("single-interview pipeline timing (interview {})\n", self.interview_id);
        for (name, secs) in &self.timings.stages {
            out.push_str(&format!("  {name:<14} {secs:>8.3} s\n"));
        }
        out.push_str(&format!("  {:<14} {:>8.3} s\n", "total", self.timings.total_secs));
        out.push_str(&format!(
            "reference figure: {:.2} s on the original hardware (informational; hardware-dependent)\n",
            self.reference_secs
        ));
        out
    }
}

/// Times the full pipeline once.
pub fn bench_single(
    interview: &Interview,
    artifacts: &InferenceArtifacts,
    client: &LlmClient,
    acronyms: &AcronymTable,
) -> Result<BenchReport, PipelineError> {
    let (_, timings) = process_recording(interview, artifacts, client, acronyms)?;
    Ok(BenchReport {
        interview_id: interview.id,
        timings,
        reference_secs: crate::eval::REFERENCE_SINGLE_INTERVIEW_SECS,
    })
}

/// Convenience: a checkpoint-ready metadata value.
pub fn inference_metadata_json(meta: &InferenceMetadata) -> serde_json::Value {
    serde_json::to_value(meta).expect("metadata serializes")
}

/// Picks two interviews per class as exemplars and returns (exemplars,
/// remaining corpus). Fails if either class has fewer than two.
pub fn split_off_exemplars(
    interviews: Vec<Interview>,
    acronyms: &AcronymTable,
) -> Result<(ExemplarSet, Vec<Interview>), PipelineError> {
    let mut depressed = Vec::new();
    let mut not_depressed = Vec::new();
    let mut rest = Vec::new();
    for iv in interviews {
        if iv.label == Label::Depressed && depressed.len() < 2 {
            depressed.push(iv);
        } else if iv.label == Label::NotDepressed && not_depressed.len() < 2 {
            not_depressed.push(iv);
        } else {
            rest.push(iv);
        }
    }
    let chosen: Vec<Interview> =
        depressed.into_iter().chain(not_depressed.into_iter()).collect();
    let exemplars = exemplars_from_interviews(&chosen, acronyms)?;
    Ok((exemplars, rest))
}

/// Verdict bit map for a dataset builder.
pub fn verdict_bits(verdicts: &[LlmVerdict]) -> BTreeMap<u32, f64> {
    verdicts.iter().map(|v| (v.interview_id, v.diagnosis.as_bit())).collect()
}

/// Dispatches backend construction for library-known kinds; the CLI passes
/// its own boxed backend for remote configurations.
pub fn default_backend(cfg: &PipelineConfig) -> Option<Box<dyn ChatBackend>> {
    match cfg.llm.backend {
        BackendKind::Stub => Some(Box::new(stub_backend_from_config(cfg))),
        BackendKind::Remote => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;
    use crate::fusion::{build_model, save_checkpoint, train, FusionHyperparams, TrainOptions};
    use crate::visualfeat::fit_fau_scaler;

    fn fast_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.mfcc.window_ms = 256.0;
        cfg.mfcc.overlap_ms = 0.0;
        cfg
    }

    #[test]
    fn prepare_interview_produces_aligned_sevenfold_features() {
        let corpus = synth_corpus(2, 0.5, 42).unwrap();
        let cfg = fast_cfg();
        let prepared =
            prepare_interview(&corpus[0], &AcronymTable::builtin(), &cfg, 1).unwrap();
        assert!(!prepared.segments.is_empty());
        assert_eq!(prepared.segments.len() % 7, 0);
        let originals =
            prepared.segments.iter().filter(|s| s.tag.is_original()).count();
        assert_eq!(prepared.segments.len(), originals * 7);
        // 256 ms window, no overlap: 1 + (128000 - 4096) / 4096 = 31 frames.
        assert_eq!(prepared.segments[0].mfcc.dim(), (31, 60));
        assert_eq!(prepared.segments[0].fau_raw.dim(), (240, 20));
        assert!(prepared.dialogue.contains("Therapist: "));
        assert!(prepared.dialogue.contains("Patient: "));
    }

    #[test]
    fn end_to_end_single_recording_matches_ground_truth() {
        // Tiny corpus: 4 exemplars + 4 train + 1 probe.
        let corpus = synth_corpus(9, 0.5, 7).unwrap();
        let acronyms = AcronymTable::builtin();
        let (exemplars, rest) = split_off_exemplars(corpus, &acronyms).unwrap();
        assert_eq!(exemplars.exemplars.len(), 4);

        let cfg = fast_cfg();
        let client = llm_client(Box::new(stub_backend_from_config(&cfg)), &cfg).unwrap();
        let (train_ivs, probe) = rest.split_at(rest.len() - 1);
        let data = prepare_dataset(train_ivs, &acronyms, &exemplars, &client, &cfg, 3).unwrap();

        // Train a small model on everything prepared.
        let h = FusionHyperparams {
            bilstm1_units: 6,
            dropout1: 0.1,
            bilstm2_units: 4,
            dropout2: 0.1,
            bilstm3_units: 4,
            dropout3: 0.1,
            fusion_bilstm_units: 4,
            fusion_dropout: 0.1,
            learning_rate: 3e-3,
            batch_size: 16,
            ..FusionHyperparams::default()
        };
        let scaler_mats: Vec<FauMatrix> = data
            .interviews
            .iter()
            .flat_map(|iv| iv.segments.iter())
            .filter(|s| s.tag.is_original())
            .map(|s| FauMatrix { values: s.fau_raw.clone() })
            .collect();
        let scaler = fit_fau_scaler(&scaler_mats).unwrap();

        let train_ids: std::collections::BTreeSet<u32> =
            data.ids().iter().copied().take(3).collect();
        let val_ids: std::collections::BTreeSet<u32> =
            data.ids().iter().copied().skip(3).collect();
        let collect = |ids: &std::collections::BTreeSet<u32>, aug: bool| {
            let mut samples = Vec::new();
            for iv in &data.interviews {
                if !ids.contains(&iv.id) {
                    continue;
                }
                for s in &iv.segments {
                    if !aug && !s.tag.is_original() {
                        continue;
                    }
                    samples.push(SegmentSample {
                        interview_id: iv.id,
                        segment_index: s.segment_index,
                        tag: s.tag,
                        label: iv.label,
                        llm_bit: iv.llm_bit,
                        mfcc: s.mfcc.clone(),
                        fau: apply_fau_scaler(&FauMatrix { values: s.fau_raw.clone() }, &scaler)
                            .values,
                    });
                }
            }
            SegmentSet { samples }
        };
        let train_set = collect(&train_ids, true);
        let val_set = collect(&val_ids, false);
        let t_frames = train_set.t_frames().unwrap();
        let mut model = build_model(&h, t_frames, 5).unwrap();
        let opts = TrainOptions { max_epochs: 12, patience: 3, batch_size: 16, learning_rate: 3e-3, seed: 5 };
        train(&mut model, &train_set, &val_set, (1.0, 1.0), &opts).unwrap();

        // Persist and reload through the checkpoint, then process the probe.
        let dir = tempfile::tempdir().unwrap();
        let ckpt_path = dir.path().join("model.dsck");
        let metadata = InferenceMetadata {
            mfcc: cfg.mfcc,
            noise_amplitude: cfg.augment.noise_amplitude,
            scaler,
            exemplars: exemplars.clone(),
        };
        save_checkpoint(&ckpt_path, &mut model, inference_metadata_json(&metadata)).unwrap();
        let artifacts = InferenceArtifacts::load(&ckpt_path).unwrap();

        let (report, timings) =
            process_recording(&probe[0], &artifacts, &client, &acronyms).unwrap();
        assert_eq!(report.interview_id, probe[0].id);
        assert!(report.confidence >= 0.0 && report.confidence <= 1.0);
        assert!(!report.summary.is_empty());
        assert!(timings.total_secs > 0.0);
        assert_eq!(timings.stages.len(), 5);

        // Deterministic apart from the timestamp.
        let (again, _) = process_recording(&probe[0], &artifacts, &client, &acronyms).unwrap();
        assert_eq!(again.diagnosis, report.diagnosis);
        assert_eq!(again.summary, report.summary);
        assert_eq!(again.confidence, report.confidence);
    }
}
