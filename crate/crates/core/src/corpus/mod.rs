//! Interview records: loading, validation, repair, and synthesis.
//!
//! A corpus lives on disk in the DAIC-WOZ layout: one `<id>_P/` directory
//! per interview holding `<id>_AUDIO.wav`, `<id>_TRANSCRIPT.csv` and
//! `<id>_FAU.csv`, plus a corpus-level `labels.csv` and an error-manifest
//! file with known dataset corrections. Real interviews carry ids 300–492;
//! synthetic ones start at 1000.

mod layout;
mod manifest;
mod synth;

pub use layout::{corpus_ids, load_interview, load_labels, write_corpus, write_labels};
pub use manifest::{apply_error_manifest, ErrorManifest, LabelOverride};
pub use synth::{synth_corpus, synth_corpus_with, SynthOptions};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Audio sample rate all corpus waveforms are required to use.
pub const SAMPLE_RATE: u32 = 16_000;

/// FAU tracks are extracted at 30 frames per second.
pub const FAU_FPS: f64 = 30.0;

/// PHQ-8 cut-off score (inclusive) for the depressed label.
pub const PHQ8_CUTOFF: u8 = 10;

/// Number of continuous (intensity) action-unit columns.
pub const FAU_INTENSITY_COLS: usize = 14;

/// Number of binary (presence) action-unit columns.
pub const FAU_PRESENCE_COLS: usize = 6;

/// Column order of the FAU table: 14 intensity units then 6 presence units.
pub const FAU_COLUMNS: [&str; 20] = [
    "AU01_r", "AU02_r", "AU04_r", "AU05_r", "AU06_r", "AU09_r", "AU10_r", "AU12_r", "AU14_r",
    "AU15_r", "AU17_r", "AU20_r", "AU25_r", "AU26_r", "AU04_c", "AU12_c", "AU15_c", "AU23_c",
    "AU28_c", "AU45_c",
];

/// Binary diagnosis target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Depressed,
    NotDepressed,
}

impl Label {
    /// Applies the inclusive cut-off rule: a PHQ-8 score of 10 or more is
    /// labeled depressed.
    pub fn from_phq8(score: u8) -> Self {
        if score >= PHQ8_CUTOFF {
            Label::Depressed
        } else {
            Label::NotDepressed
        }
    }

    /// 1.0 for depressed, 0.0 otherwise; the form consumed by the model.
    pub fn as_bit(self) -> f64 {
        match self {
            Label::Depressed => 1.0,
            Label::NotDepressed => 0.0,
        }
    }

    pub fn from_bit(bit: u8) -> Self {
        if bit != 0 {
            Label::Depressed
        } else {
            Label::NotDepressed
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Depressed => write!(f, "depressed"),
            Label::NotDepressed => write!(f, "not depressed"),
        }
    }
}

/// Diarized speaker of an utterance. `Ellie`/`Participant` are the raw corpus
/// names; `Therapist`/`Patient` the normalized ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    Ellie,
    Participant,
    Therapist,
    Patient,
    /// Anything else found in a transcript; rejected during normalization.
    Other(String),
}

impl Speaker {
    pub fn parse(raw: &str) -> Self {
        match raw.trim() {
            "Ellie" => Speaker::Ellie,
            "Participant" => Speaker::Participant,
            "Therapist" => Speaker::Therapist,
            "Patient" => Speaker::Patient,
            other => Speaker::Other(other.to_string()),
        }
    }

    pub fn is_patient_side(&self) -> bool {
        matches!(self, Speaker::Participant | Speaker::Patient)
    }

    pub fn is_interviewer_side(&self) -> bool {
        matches!(self, Speaker::Ellie | Speaker::Therapist)
    }
}

impl std::fmt::Display for Speaker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Speaker::Ellie => write!(f, "Ellie"),
            Speaker::Participant => write!(f, "Participant"),
            Speaker::Therapist => write!(f, "Therapist"),
            Speaker::Patient => write!(f, "Patient"),
            Speaker::Other(s) => write!(f, "{s}"),
        }
    }
}

/// One diarized, time-stamped transcript line. Times are in seconds with
/// centisecond resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub start_time: f64,
    pub stop_time: f64,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, start_time: f64, stop_time: f64, text: impl Into<String>) -> Self {
        Utterance { speaker, start_time, stop_time, text: text.into() }
    }

    pub fn duration(&self) -> f64 {
        self.stop_time - self.start_time
    }
}

/// Rounds a timestamp to centisecond resolution, the precision the
/// transcript format carries.
pub fn quantize_centis(t: f64) -> f64 {
    (t * 100.0).round() / 100.0
}

/// One FAU observation: 14 intensity values (order = `FAU_COLUMNS[0..14]`)
/// and 6 presence flags (`FAU_COLUMNS[14..20]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FauFrame {
    pub timestamp: f64,
    pub intensities: [f32; FAU_INTENSITY_COLS],
    pub presences: [u8; FAU_PRESENCE_COLS],
}

/// One subject's full record.
#[derive(Debug, Clone, PartialEq)]
pub struct Interview {
    /// 300–492 for real data, 1000 and up for synthetic.
    pub id: u32,
    /// Mono waveform at 16 kHz, amplitudes in [-1, 1].
    pub audio: Vec<f32>,
    /// Ordered transcript.
    pub utterances: Vec<Utterance>,
    /// Ordered FAU track at 30 frames/s.
    pub fau_track: Vec<FauFrame>,
    /// PHQ-8 total, 0–24.
    pub phq8_score: u8,
    pub label: Label,
}

impl Interview {
    pub fn duration_secs(&self) -> f64 {
        self.audio.len() as f64 / SAMPLE_RATE as f64
    }

    /// Checks every structural invariant of the record. Freshly loaded real
    /// interviews may legitimately fail this (that is what the error
    /// manifest repairs); after `apply_error_manifest` it must hold.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |msg: String| {
            Err(CorpusError::InvariantViolation { id: self.id, msg })
        };
        if self.phq8_score > 24 {
            return fail(format!("phq8_score {} out of range", self.phq8_score));
        }
        if self.label != Label::from_phq8(self.phq8_score) {
            return fail(format!(
                "label {:?} inconsistent with phq8_score {}",
                self.label, self.phq8_score
            ));
        }
        let duration = self.duration_secs();
        let mut prev_stop = 0.0f64;
        for (i, u) in self.utterances.iter().enumerate() {
            if u.start_time >= u.stop_time {
                return fail(format!("utterance {i} has start >= stop"));
            }
            if u.start_time < -1e-9 || u.stop_time > duration + 1e-9 {
                return fail(format!(
                    "utterance {i} interval [{}, {}] outside [0, {duration:.2}]",
                    u.start_time, u.stop_time
                ));
            }
            if u.start_time < prev_stop - 1e-9 {
                return fail(format!("utterance {i} overlaps its predecessor"));
            }
            prev_stop = u.stop_time;
        }
        for (i, f) in self.fau_track.iter().enumerate() {
            if f.presences.iter().any(|&p| p > 1) {
                return fail(format!("fau frame {i} has a non-binary presence flag"));
            }
            if f.intensities.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return fail(format!("fau frame {i} has a negative or non-finite intensity"));
            }
        }
        let expected = FAU_FPS * duration;
        let count = self.fau_track.len() as f64;
        if (count - expected).abs() > 30.0 {
            return fail(format!(
                "fau track has {count} frames, expected {expected:.0} +/- 30"
            ));
        }
        Ok(())
    }

    /// Total seconds of patient speech according to the transcript.
    pub fn patient_speech_secs(&self) -> f64 {
        self.utterances
            .iter()
            .filter(|u| u.speaker.is_patient_side())
            .map(Utterance::duration)
            .sum()
    }
}

/// Errors from corpus loading, repair, and synthesis.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed csv {path}, line {line}: {msg}")]
    MalformedCsv { path: PathBuf, line: usize, msg: String },
    #[error("sample rate mismatch: expected {SAMPLE_RATE} Hz, got {0} Hz")]
    SampleRateMismatch(u32),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedWav(String),
    #[error("trim interval ({0}, {1}) outside interview duration {2:.2}")]
    IntervalOutOfRange(f64, f64, f64),
    #[error("label override for interview {id} violates the PHQ-8 cut-off rule")]
    InconsistentOverride { id: u32 },
    #[error("manifest trim intervals for interview {id} overlap")]
    OverlappingTrims { id: u32 },
    #[error("depressed fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("synthetic corpus needs at least 2 interviews, got {0}")]
    CorpusTooSmall(usize),
    #[error("interview {id} violates an invariant: {msg}")]
    InvariantViolation { id: u32, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("wav error on {path}: {source}")]
    Wav { path: PathBuf, source: hound::Error },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_is_inclusive_at_ten() {
        assert_eq!(Label::from_phq8(9), Label::NotDepressed);
        assert_eq!(Label::from_phq8(10), Label::Depressed);
        assert_eq!(Label::from_phq8(24), Label::Depressed);
    }

    #[test]
    fn quantize_rounds_to_centiseconds() {
        assert_eq!(quantize_centis(1.2349), 1.23);
        assert_eq!(quantize_centis(1.235001), 1.24);
    }

    #[test]
    fn validate_rejects_label_score_mismatch() {
        let iv = Interview {
            id: 1,
            audio: vec![0.0; SAMPLE_RATE as usize],
            utterances: vec![],
            fau_track: vec![],
            phq8_score: 10,
            label: Label::NotDepressed,
        };
        assert!(matches!(
            iv.validate(),
            Err(CorpusError::InvariantViolation { id: 1, .. })
        ));
    }

    #[test]
    fn validate_rejects_overlapping_utterances() {
        let mut iv = Interview {
            id: 2,
            audio: vec![0.0; SAMPLE_RATE as usize * 10],
            utterances: vec![
                Utterance::new(Speaker::Ellie, 0.0, 2.0, "a"),
                Utterance::new(Speaker::Participant, 1.5, 3.0, "b"),
            ],
            fau_track: vec![],
            phq8_score: 0,
            label: Label::NotDepressed,
        };
        // 10 s of audio, 300 expected frames; an empty track is outside +/-30.
        assert!(iv.validate().is_err());
        iv.utterances[1].start_time = 2.0;
        assert!(matches!(
            iv.validate(),
            Err(CorpusError::InvariantViolation { .. })
        ));
    }
}
