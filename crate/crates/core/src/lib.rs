//! # depscreen-core
//!
//! End-to-end toolkit for screening clinical interview recordings for
//! depression. A recording is consumed as three modalities — a 16 kHz mono
//! waveform, a diarized transcript, and a facial-action-unit (FAU) track —
//! and turned into a binary diagnosis plus a clinical report.
//!
//! The pipeline stages map onto the top-level modules:
//!
//! 1. [`corpus`] — load, validate, and repair interview records in the
//!    DAIC-WOZ on-disk layout; generate synthetic desk-scale corpora.
//! 2. [`transcript`] — normalize raw transcripts into clean diarized
//!    dialogue text.
//! 3. [`audiofeat`] — slice patient-only audio into 8-second segments,
//!    augment seven-fold, extract 60 MFCCs per frame, apply CMVN.
//! 4. [`visualfeat`] — align FAU blocks with the audio segments and scale
//!    the continuous action units.
//! 5. [`llm`] — classify full transcripts with a few-shot chat-completion
//!    prompt (schema-forced output), with a deterministic offline stub and
//!    a response cache; generate clinical reports.
//! 6. [`fusion`] — the tri-modal BiLSTM fusion network, training with
//!    class-weighted loss, and interview-level aggregation.
//! 7. [`tuning`] — Hyperband search over the model hyperparameter space.
//! 8. [`eval`] — AVEC-style split evaluation and leave-one-subject-out
//!    cross-validation with pooled interview-level metrics.
//!
//! Supporting modules: [`store`] (binary feature tensors + manifest),
//! [`pipeline`] (stage orchestration and the single-recording entry point),
//! and [`config`] (TOML configuration shared with the CLI).

pub mod audiofeat;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod fusion;
pub mod llm;
pub mod pipeline;
pub mod store;
pub mod transcript;
pub mod tuning;
pub mod visualfeat;

pub use corpus::{Interview, Label, Utterance};
pub use fusion::FusionHyperparams;
pub use llm::{ClinicalReport, LlmVerdict};
