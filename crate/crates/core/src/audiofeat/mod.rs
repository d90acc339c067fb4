//! Audio features: patient-only segmentation, seven-fold augmentation,
//! MFCC extraction, and cepstral mean/variance normalization.

mod augment;
mod mfcc;

pub use augment::{
    dominant_frequency, inject_noise, make_augmented_set, make_augmented_set_with, pitch_shift,
    AugmentTag, PitchStep, DEFAULT_NOISE_AMPLITUDE,
};
pub use mfcc::extract_mfcc;

use crate::corpus::{Interview, SAMPLE_RATE};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Training segments are 8 seconds of 16 kHz audio.
pub const SEGMENT_SECONDS: f64 = 8.0;
pub const SEGMENT_SAMPLES: usize = 128_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("interview has no patient utterances")]
    NoPatientSpeech,
    #[error("waveform of {samples} samples is shorter than one {window}-sample analysis window")]
    TooShort { samples: usize, window: usize },
    #[error("matrix has {0} frames; normalization needs at least 2")]
    TooFewFrames(usize),
    #[error("bad feature configuration: {0}")]
    BadConfig(String),
}

/// Frame placement policy for MFCC extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramingPolicy {
    /// Frames lie fully inside the signal (no padding artifacts at segment
    /// edges); `n_frames = 1 + (len - window) / hop`. The default.
    TruncatedUncentered,
    /// Frames centered on `t * hop` with zero padding at the edges;
    /// `n_frames = 1 + len / hop`.
    PaddedCentered,
}

/// MFCC extraction settings. The defaults give 60 coefficients from 124 ms
/// Hann windows with 92 ms overlap (32 ms hop = 512 samples at 16 kHz) over
/// a 128-filter mel bank spanning 0–8 kHz.
///
/// Window and overlap are fractional milliseconds so sub-millisecond hops
/// stay constructible (e.g. a 31.25 ms hop is exactly 500 samples at
/// 16 kHz); both must land on whole sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub n_mfcc: usize,
    pub window_ms: f64,
    pub overlap_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub framing_policy: FramingPolicy,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: SAMPLE_RATE,
            n_mfcc: 60,
            window_ms: 124.0,
            overlap_ms: 92.0,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8000.0,
            framing_policy: FramingPolicy::TruncatedUncentered,
        }
    }
}

fn whole_samples(ms: f64, sample_rate: u32) -> Option<usize> {
    let exact = ms * sample_rate as f64 / 1000.0;
    (exact > 0.0 && (exact - exact.round()).abs() < 1e-9).then_some(exact.round() as usize)
}

impl MfccConfig {
    pub fn hop_ms(&self) -> f64 {
        self.window_ms - self.overlap_ms
    }

    pub fn window_samples(&self) -> usize {
        whole_samples(self.window_ms, self.sample_rate).unwrap_or(0)
    }

    pub fn hop_samples(&self) -> usize {
        whole_samples(self.hop_ms(), self.sample_rate).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if self.overlap_ms >= self.window_ms || self.overlap_ms < 0.0 {
            return Err(AudioError::BadConfig(format!(
                "overlap {} ms must be non-negative and smaller than window {} ms",
                self.overlap_ms, self.window_ms
            )));
        }
        if whole_samples(self.window_ms, self.sample_rate).is_none()
            || whole_samples(self.hop_ms(), self.sample_rate).is_none()
        {
            return Err(AudioError::BadConfig(format!(
                "window {} ms / hop {} ms are not whole sample counts at {} Hz",
                self.window_ms,
                self.hop_ms(),
                self.sample_rate
            )));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(AudioError::BadConfig(format!(
                "n_mfcc {} must be in 1..={}",
                self.n_mfcc, self.n_mels
            )));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 || self.fmin >= self.fmax {
            return Err(AudioError::BadConfig("bad mel frequency range".into()));
        }
        Ok(())
    }

    /// Frame count for a waveform of `n_samples` under the framing policy.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        let win = self.window_samples();
        let hop = self.hop_samples();
        match self.framing_policy {
            FramingPolicy::TruncatedUncentered => {
                if n_samples < win {
                    0
                } else {
                    1 + (n_samples - win) / hop
                }
            }
            FramingPolicy::PaddedCentered => 1 + n_samples / hop,
        }
    }
}

/// `[n_frames x n_mfcc]` coefficient matrix, one row per analysis frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    pub values: Array2<f64>,
}

/// A span of original interview time contributing to a patient-speech
/// segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeInterval {
    pub start: f64,
    pub stop: f64,
}

/// Where segment `index` lives: its start offset on the concatenated
/// patient-speech axis and the original-time intervals composing it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpan {
    pub index: usize,
    /// Seconds into concatenated patient speech where this segment begins.
    pub patient_start: f64,
    pub pieces: Vec<TimeInterval>,
}

/// Patient-only audio cut into consecutive disjoint 8 s segments.
#[derive(Debug, Clone)]
pub struct SegmentedAudio {
    pub segments: Vec<Vec<f32>>,
    pub spans: Vec<SegmentSpan>,
}

/// Crops patient-utterance intervals, concatenates them in time order, and
/// splits the result into 128,000-sample chunks; any tail shorter than a
/// full chunk is discarded. Therapist audio never appears in the output.
pub fn segment_patient_audio(interview: &Interview) -> Result<SegmentedAudio, AudioError> {
    let sr = SAMPLE_RATE as f64;
    let patient: Vec<(usize, usize, f64)> = interview
        .utterances
        .iter()
        .filter(|u| u.speaker.is_patient_side())
        .map(|u| {
            let a = ((u.start_time * sr).round() as usize).min(interview.audio.len());
            let b = ((u.stop_time * sr).round() as usize).min(interview.audio.len());
            (a, b, u.start_time)
        })
        .filter(|(a, b, _)| b > a)
        .collect();
    if patient.is_empty() {
        return Err(AudioError::NoPatientSpeech);
    }

    let total: usize = patient.iter().map(|(a, b, _)| b - a).sum();
    let n_segments = total / SEGMENT_SAMPLES;
    let mut concatenated = Vec::with_capacity(total);
    // (concat_start, concat_stop, orig_start_sample) per piece
    let mut pieces = Vec::with_capacity(patient.len());
    for (a, b, _) in &patient {
        pieces.push((concatenated.len(), concatenated.len() + (b - a), *a));
        concatenated.extend_from_slice(&interview.audio[*a..*b]);
    }

    let mut segments = Vec::with_capacity(n_segments);
    let mut spans = Vec::with_capacity(n_segments);
    for k in 0..n_segments {
        let lo = k * SEGMENT_SAMPLES;
        let hi = lo + SEGMENT_SAMPLES;
        segments.push(concatenated[lo..hi].to_vec());
        let mut intervals = Vec::new();
        for &(c0, c1, orig) in &pieces {
            let ov_lo = lo.max(c0);
            let ov_hi = hi.min(c1);
            if ov_hi > ov_lo {
                let start = (orig + (ov_lo - c0)) as f64 / sr;
                let stop = (orig + (ov_hi - c0)) as f64 / sr;
                intervals.push(TimeInterval { start, stop });
            }
        }
        spans.push(SegmentSpan {
            index: k,
            patient_start: lo as f64 / sr,
            pieces: intervals,
        });
    }
    Ok(SegmentedAudio { segments, spans })
}

/// Cepstral mean and variance normalization: per coefficient (column over
/// time), zero mean and unit population variance; zero-variance columns map
/// to all-zeros. Idempotent.
pub fn cmvn(m: &MfccMatrix) -> Result<MfccMatrix, AudioError> {
    let (rows, cols) = m.values.dim();
    if rows < 2 {
        return Err(AudioError::TooFewFrames(rows));
    }
    let mut out = m.values.clone();
    for j in 0..cols {
        let mut col = out.column_mut(j);
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        if std < 1e-12 {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|x| (x - mean) / std);
        }
    }
    Ok(MfccMatrix { values: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Speaker, Utterance};
    use ndarray::Array2;

    fn interview_with_patient_speech(utts: Vec<Utterance>, total_secs: f64) -> Interview {
        let n = (total_secs * SAMPLE_RATE as f64) as usize;
        let audio: Vec<f32> = (0..n).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect();
        Interview {
            id: 1,
            audio,
            utterances: utts,
            fau_track: vec![],
            phq8_score: 0,
            label: Label::NotDepressed,
        }
    }

    #[test]
    fn twenty_seconds_of_patient_speech_gives_two_segments() {
        let iv = interview_with_patient_speech(
            vec![
                Utterance::new(Speaker::Patient, 1.0, 11.0, "a"),
                Utterance::new(Speaker::Therapist, 11.5, 13.0, "q"),
                Utterance::new(Speaker::Patient, 13.5, 23.5, "b"),
            ],
            30.0,
        );
        let seg = segment_patient_audio(&iv).unwrap();
        assert_eq!(seg.segments.len(), 2);
        assert!(seg.segments.iter().all(|s| s.len() == SEGMENT_SAMPLES));
        // 20 s total; 4 s tail discarded.
        assert_eq!(seg.spans.len(), 2);
        assert_eq!(seg.spans[1].patient_start, 8.0);
    }

    #[test]
    fn under_eight_seconds_gives_no_segments() {
        let iv = interview_with_patient_speech(
            vec![Utterance::new(Speaker::Patient, 0.5, 8.4, "a")],
            10.0,
        );
        let seg = segment_patient_audio(&iv).unwrap();
        assert!(seg.segments.is_empty());
    }

    #[test]
    fn no_patient_speech_is_an_error() {
        let iv = interview_with_patient_speech(
            vec![Utterance::new(Speaker::Therapist, 0.5, 3.0, "q")],
            5.0,
        );
        assert!(matches!(segment_patient_audio(&iv), Err(AudioError::NoPatientSpeech)));
    }

    #[test]
    fn segment_contains_exactly_the_patient_samples() {
        // Patient speech flanked by therapist speech; samples are marked so
        // provenance is checkable. Boundary error must stay within one
        // centisecond (160 samples).
        let sr = SAMPLE_RATE as f64;
        let mut audio = vec![-1.0f32; (20.0 * sr) as usize];
        let a = (5.0 * sr) as usize;
        let b = (13.0 * sr) as usize;
        for s in &mut audio[a..b] {
            *s = 1.0;
        }
        let iv = Interview {
            id: 2,
            audio,
            utterances: vec![
                Utterance::new(Speaker::Therapist, 0.0, 4.9, "q"),
                Utterance::new(Speaker::Patient, 5.0, 13.0, "a"),
                Utterance::new(Speaker::Therapist, 13.1, 19.0, "q"),
            ],
            fau_track: vec![],
            phq8_score: 0,
            label: Label::NotDepressed,
        };
        let seg = segment_patient_audio(&iv).unwrap();
        assert_eq!(seg.segments.len(), 1);
        let wrong: usize = seg.segments[0].iter().filter(|&&s| s < 0.0).count();
        assert!(wrong <= 160, "{wrong} foreign samples leaked into the segment");
        assert_eq!(seg.spans[0].pieces.len(), 1);
        assert!((seg.spans[0].pieces[0].start - 5.0).abs() < 0.01);
    }

    #[test]
    fn fractional_hop_reading_is_constructible() {
        // A 31.25 ms hop is exactly 500 samples; centered framing then puts
        // 257 frames (15,420 coefficients) on an 8 s segment.
        let cfg = MfccConfig {
            overlap_ms: 92.75,
            framing_policy: FramingPolicy::PaddedCentered,
            ..MfccConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.hop_samples(), 500);
        assert_eq!(cfg.frame_count(SEGMENT_SAMPLES), 257);
        assert_eq!(cfg.frame_count(SEGMENT_SAMPLES) * cfg.n_mfcc, 15_420);

        // The default reading: 512-sample hop, frames fully inside.
        let default = MfccConfig::default();
        assert_eq!(default.hop_samples(), 512);
        assert_eq!(default.frame_count(SEGMENT_SAMPLES), 247);
    }

    #[test]
    fn cmvn_normalizes_columns() {
        let m = MfccMatrix {
            values: Array2::from_shape_fn((50, 4), |(i, j)| {
                (i as f64 * 0.37 + j as f64).sin() * (j + 1) as f64 + j as f64
            }),
        };
        let out = cmvn(&m).unwrap();
        for j in 0..4 {
            let col = out.values.column(j);
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var.sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cmvn_zeroes_constant_columns_and_rejects_single_frame() {
        let mut values = Array2::zeros((10, 2));
        for i in 0..10 {
            values[(i, 1)] = i as f64;
        }
        let out = cmvn(&MfccMatrix { values }).unwrap();
        assert!(out.values.column(0).iter().all(|&x| x == 0.0));

        let one = MfccMatrix { values: Array2::zeros((1, 2)) };
        assert!(matches!(cmvn(&one), Err(AudioError::TooFewFrames(1))));
    }

    #[test]
    fn cmvn_is_affine_invariant_and_idempotent() {
        let m = MfccMatrix {
            values: Array2::from_shape_fn((30, 3), |(i, j)| ((i * 7 + j * 3) % 13) as f64 * 0.5),
        };
        let direct = cmvn(&m).unwrap();
        let scaled = MfccMatrix { values: m.values.mapv(|x| 2.5 * x - 7.0) };
        let via_affine = cmvn(&scaled).unwrap();
        let max_diff = (&direct.values - &via_affine.values)
            .iter()
            .map(|d| d.abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9);

        let twice = cmvn(&direct).unwrap();
        let max_diff =
            (&twice.values - &direct.values).iter().map(|d| d.abs()).fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6);
    }
}
