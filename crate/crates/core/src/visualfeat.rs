//! FAU features: crops the action-unit track to patient-speech time, slices
//! it into 8-second blocks aligned one-to-one with the audio segments, and
//! standardizes the continuous columns.
//!
//! Audio augmentation does not touch the visual stream: all seven audio
//! variants of a segment reuse that segment's FAU matrix.

use crate::audiofeat::SegmentSpan;
use crate::corpus::{Interview, FAU_FPS, FAU_INTENSITY_COLS, FAU_PRESENCE_COLS};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Rows per 8-second block at 30 frames/s.
pub const FAU_SEGMENT_ROWS: usize = 240;
/// Intensity columns then presence columns.
pub const FAU_SEGMENT_COLS: usize = FAU_INTENSITY_COLS + FAU_PRESENCE_COLS;

/// Largest tolerated gap between a requested timestamp and the nearest
/// recorded frame before alignment fails.
pub const MAX_ALIGNMENT_GAP_SECS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum VisualError {
    #[error("fau track has a {gap:.2} s gap at {at_secs:.2} s inside segment {segment}")]
    AlignmentGap { segment: usize, at_secs: f64, gap: f64 },
    #[error("scaler fitting needs a non-empty training set")]
    EmptyTrainingSet,
    #[error("expected a [{FAU_SEGMENT_ROWS} x {FAU_SEGMENT_COLS}] matrix, got [{rows} x {cols}]")]
    BadShape { rows: usize, cols: usize },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed scaler file {path}: {msg}")]
    MalformedScaler { path: PathBuf, msg: String },
}

/// A `[240 x 20]` block of FAU values aligned with one audio segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FauMatrix {
    pub values: Array2<f64>,
}

impl FauMatrix {
    pub fn validate(&self) -> Result<(), VisualError> {
        let (rows, cols) = self.values.dim();
        if rows != FAU_SEGMENT_ROWS || cols != FAU_SEGMENT_COLS {
            return Err(VisualError::BadShape { rows, cols });
        }
        Ok(())
    }
}

/// Cuts the FAU track to the same patient-speech spans as the audio
/// segments. Each block gets exactly [`FAU_SEGMENT_ROWS`] rows by
/// nearest-timestamp selection (real tracks drop frames), erroring if the
/// nearest frame is more than [`MAX_ALIGNMENT_GAP_SECS`] away.
pub fn segment_patient_fau(
    interview: &Interview,
    audio_boundaries: &[SegmentSpan],
) -> Result<Vec<FauMatrix>, VisualError> {
    let timestamps: Vec<f64> = interview.fau_track.iter().map(|f| f.timestamp).collect();
    audio_boundaries
        .iter()
        .map(|span| {
            let mut values = Array2::<f64>::zeros((FAU_SEGMENT_ROWS, FAU_SEGMENT_COLS));
            for j in 0..FAU_SEGMENT_ROWS {
                let offset = j as f64 / FAU_FPS;
                let orig_t = patient_offset_to_original(span, offset);
                let idx = nearest_frame(&timestamps, orig_t).ok_or(VisualError::AlignmentGap {
                    segment: span.index,
                    at_secs: orig_t,
                    gap: f64::INFINITY,
                })?;
                let gap = (timestamps[idx] - orig_t).abs();
                if gap > MAX_ALIGNMENT_GAP_SECS {
                    return Err(VisualError::AlignmentGap { segment: span.index, at_secs: orig_t, gap });
                }
                let frame = &interview.fau_track[idx];
                for (c, &v) in frame.intensities.iter().enumerate() {
                    values[(j, c)] = v as f64;
                }
                for (c, &p) in frame.presences.iter().enumerate() {
                    values[(j, FAU_INTENSITY_COLS + c)] = p as f64;
                }
            }
            Ok(FauMatrix { values })
        })
        .collect()
}

/// Maps an offset into a segment's patient-speech time onto original
/// interview time by walking the segment's pieces.
fn patient_offset_to_original(span: &SegmentSpan, offset: f64) -> f64 {
    let mut remaining = offset;
    for piece in &span.pieces {
        let len = piece.stop - piece.start;
        if remaining < len {
            return piece.start + remaining;
        }
        remaining -= len;
    }
    span.pieces.last().map(|p| p.stop).unwrap_or(0.0)
}

fn nearest_frame(timestamps: &[f64], t: f64) -> Option<usize> {
    if timestamps.is_empty() {
        return None;
    }
    let idx = timestamps.partition_point(|&x| x < t);
    let mut best = idx.min(timestamps.len() - 1);
    if idx > 0 {
        let before = idx - 1;
        if (timestamps[before] - t).abs() <= (timestamps[best] - t).abs() {
            best = before;
        }
    }
    Some(best)
}

/// Per-column standardization parameters for the 14 continuous rows,
/// fitted on training-partition data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FauScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns whose training variance was zero; their std is recorded as 1
    /// so application is a plain mean shift.
    pub degenerate: Vec<bool>,
}

/// Computes per-continuous-column mean and population standard deviation
/// over all rows of all training matrices.
pub fn fit_fau_scaler(training_matrices: &[FauMatrix]) -> Result<FauScaler, VisualError> {
    if training_matrices.is_empty() {
        return Err(VisualError::EmptyTrainingSet);
    }
    for m in training_matrices {
        m.validate()?;
    }
    let total_rows: usize = training_matrices.len() * FAU_SEGMENT_ROWS;
    let mut means = vec![0.0f64; FAU_INTENSITY_COLS];
    let mut stds = vec![0.0f64; FAU_INTENSITY_COLS];
    let mut degenerate = vec![false; FAU_INTENSITY_COLS];
    for c in 0..FAU_INTENSITY_COLS {
        let mut sum = 0.0;
        for m in training_matrices {
            sum += m.values.column(c).sum();
        }
        let mean = sum / total_rows as f64;
        let mut ss = 0.0;
        for m in training_matrices {
            ss += m.values.column(c).iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>();
        }
        let std = (ss / total_rows as f64).sqrt();
        means[c] = mean;
        if std < 1e-12 {
            stds[c] = 1.0;
            degenerate[c] = true;
        } else {
            stds[c] = std;
        }
    }
    Ok(FauScaler { means, stds, degenerate })
}

/// `(x - mean) / std` on the continuous columns; presence columns pass
/// through unchanged.
pub fn apply_fau_scaler(m: &FauMatrix, s: &FauScaler) -> FauMatrix {
    let mut values = m.values.clone();
    for c in 0..FAU_INTENSITY_COLS {
        let mean = s.means[c];
        let std = s.stds[c];
        values.column_mut(c).mapv_inplace(|x| (x - mean) / std);
    }
    FauMatrix { values }
}

/// On-disk scaler layout: one `[[columns]]` table per continuous action
/// unit, fourteen (mean, std, degenerate) triples in row order.
#[derive(Serialize, Deserialize)]
struct ScalerFile {
    columns: Vec<ScalerColumn>,
}

#[derive(Serialize, Deserialize)]
struct ScalerColumn {
    mean: f64,
    std: f64,
    degenerate: bool,
}

impl FauScaler {
    pub fn save(&self, path: &Path) -> Result<(), VisualError> {
        let file = ScalerFile {
            columns: (0..FAU_INTENSITY_COLS)
                .map(|c| ScalerColumn {
                    mean: self.means[c],
                    std: self.stds[c],
                    degenerate: self.degenerate[c],
                })
                .collect(),
        };
        let text = toml::to_string_pretty(&file).expect("scaler serializes");
        std::fs::write(path, text)
            .map_err(|source| VisualError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, VisualError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| VisualError::Io { path: path.to_path_buf(), source })?;
        let file: ScalerFile = toml::from_str(&text).map_err(|e| VisualError::MalformedScaler {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if file.columns.len() != FAU_INTENSITY_COLS {
            return Err(VisualError::MalformedScaler {
                path: path.to_path_buf(),
                msg: format!("expected {FAU_INTENSITY_COLS} columns, got {}", file.columns.len()),
            });
        }
        Ok(FauScaler {
            means: file.columns.iter().map(|c| c.mean).collect(),
            stds: file.columns.iter().map(|c| c.std).collect(),
            degenerate: file.columns.iter().map(|c| c.degenerate).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::{segment_patient_audio, TimeInterval};
    use crate::corpus::{FauFrame, Label, Speaker, Utterance, SAMPLE_RATE};

    fn track(duration: f64) -> Vec<FauFrame> {
        (0..(duration * FAU_FPS) as usize)
            .map(|j| FauFrame {
                timestamp: j as f64 / FAU_FPS,
                intensities: [j as f32 * 0.01; FAU_INTENSITY_COLS],
                presences: [(j % 2) as u8; FAU_PRESENCE_COLS],
            })
            .collect()
    }

    fn interview(duration: f64, utts: Vec<Utterance>) -> Interview {
        Interview {
            id: 5,
            audio: vec![0.05; (duration * SAMPLE_RATE as f64) as usize],
            utterances: utts,
            fau_track: track(duration),
            phq8_score: 0,
            label: Label::NotDepressed,
        }
    }

    #[test]
    fn fau_segments_match_audio_segments_one_to_one() {
        let iv = interview(
            40.0,
            vec![
                Utterance::new(Speaker::Patient, 2.0, 12.0, "a"),
                Utterance::new(Speaker::Therapist, 12.5, 14.0, "q"),
                Utterance::new(Speaker::Patient, 15.0, 25.0, "b"),
            ],
        );
        let audio = segment_patient_audio(&iv).unwrap();
        assert_eq!(audio.segments.len(), 2);
        let fau = segment_patient_fau(&iv, &audio.spans).unwrap();
        assert_eq!(fau.len(), 2);
        for m in &fau {
            m.validate().unwrap();
        }
        // Presence columns stay binary under nearest-frame selection.
        for m in &fau {
            for c in FAU_INTENSITY_COLS..FAU_SEGMENT_COLS {
                assert!(m.values.column(c).iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn zero_audio_segments_give_empty_list() {
        let iv = interview(10.0, vec![Utterance::new(Speaker::Patient, 0.0, 5.0, "a")]);
        let audio = segment_patient_audio(&iv).unwrap();
        assert!(audio.segments.is_empty());
        let fau = segment_patient_fau(&iv, &audio.spans).unwrap();
        assert!(fau.is_empty());
    }

    #[test]
    fn first_row_aligns_with_segment_start() {
        let iv = interview(
            30.0,
            vec![
                Utterance::new(Speaker::Patient, 3.0, 11.5, "a"),
                Utterance::new(Speaker::Patient, 12.0, 21.0, "b"),
            ],
        );
        let audio = segment_patient_audio(&iv).unwrap();
        let fau = segment_patient_fau(&iv, &audio.spans).unwrap();
        // Segment 0 starts at original time 3.0; intensities encode the
        // frame index, so row 0 should be the frame nearest 3.0 s.
        let got = fau[0].values[(0, 0)];
        let expected_frame = (3.0 * FAU_FPS).round();
        assert!((got - expected_frame * 0.01).abs() < 0.01 / 2.0 + 1e-9);
        // Segment 1 begins 8 s into patient speech; the first utterance is
        // 8.5 s long, so that is original time 3.0 + 8.0 = 11.0 s. Its
        // first row must be within one frame of that.
        let seg1_first = fau[1].values[(0, 0)] / 0.01;
        let seg1_orig = 3.0 + 8.0;
        assert!(
            (seg1_first / FAU_FPS - seg1_orig).abs() <= 1.0 / FAU_FPS + 1e-9,
            "first row at {} s",
            seg1_first / FAU_FPS
        );
    }

    #[test]
    fn alignment_gap_is_detected() {
        let mut iv = interview(30.0, vec![Utterance::new(Speaker::Patient, 2.0, 12.0, "a")]);
        // Remove all frames between 4 s and 7 s.
        iv.fau_track.retain(|f| !(4.0..7.0).contains(&f.timestamp));
        let audio = segment_patient_audio(&iv).unwrap();
        let err = segment_patient_fau(&iv, &audio.spans).unwrap_err();
        assert!(matches!(err, VisualError::AlignmentGap { segment: 0, .. }));
    }

    #[test]
    fn scaler_matches_two_pass_computation() {
        let mk = |offset: f64| {
            let values = Array2::from_shape_fn((FAU_SEGMENT_ROWS, FAU_SEGMENT_COLS), |(i, j)| {
                if j < FAU_INTENSITY_COLS {
                    offset + i as f64 * 0.001 * (j + 1) as f64
                } else {
                    (i % 2) as f64
                }
            });
            FauMatrix { values }
        };
        let train = vec![mk(1.0), mk(3.0)];
        let scaler = fit_fau_scaler(&train).unwrap();

        // Direct two-pass over the pooled rows.
        for c in 0..FAU_INTENSITY_COLS {
            let pooled: Vec<f64> = train
                .iter()
                .flat_map(|m| m.values.column(c).to_vec())
                .collect();
            let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
            let var =
                pooled.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / pooled.len() as f64;
            assert!((scaler.means[c] - mean).abs() < 1e-12);
            assert!((scaler.stds[c] - var.sqrt()).abs() < 1e-12);
            assert!(!scaler.degenerate[c]);
        }

        // Pooled training data after scaling is standardized.
        let scaled: Vec<FauMatrix> = train.iter().map(|m| apply_fau_scaler(m, &scaler)).collect();
        for c in 0..FAU_INTENSITY_COLS {
            let pooled: Vec<f64> =
                scaled.iter().flat_map(|m| m.values.column(c).to_vec()).collect();
            let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
            let var =
                pooled.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / pooled.len() as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var.sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_matrix_is_fully_degenerate() {
        let zero = FauMatrix { values: Array2::zeros((FAU_SEGMENT_ROWS, FAU_SEGMENT_COLS)) };
        let scaler = fit_fau_scaler(&[zero.clone()]).unwrap();
        assert!(scaler.degenerate.iter().all(|&d| d));
        assert!(scaler.means.iter().all(|&m| m == 0.0));
        // Applying a degenerate scaler is a no-op on the zero matrix.
        assert_eq!(apply_fau_scaler(&zero, &scaler).values, zero.values);
        assert!(matches!(fit_fau_scaler(&[]), Err(VisualError::EmptyTrainingSet)));
    }

    #[test]
    fn presence_columns_pass_through() {
        let mut values = Array2::zeros((FAU_SEGMENT_ROWS, FAU_SEGMENT_COLS));
        for i in 0..FAU_SEGMENT_ROWS {
            values[(i, 0)] = i as f64;
            values[(i, FAU_INTENSITY_COLS)] = [0.0, 1.0, 1.0, 0.0][i % 4];
        }
        let m = FauMatrix { values };
        let scaler = fit_fau_scaler(std::slice::from_ref(&m)).unwrap();
        let scaled = apply_fau_scaler(&m, &scaler);
        assert_eq!(
            scaled.values.column(FAU_INTENSITY_COLS),
            m.values.column(FAU_INTENSITY_COLS)
        );
        // Double application is not a no-op on continuous columns.
        let twice = apply_fau_scaler(&scaled, &scaler);
        assert_ne!(twice.values.column(0), scaled.values.column(0));
    }

    #[test]
    fn scaler_file_round_trips_as_triples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaler.toml");
        let scaler = FauScaler {
            means: (0..FAU_INTENSITY_COLS).map(|i| i as f64 * 0.5).collect(),
            stds: (0..FAU_INTENSITY_COLS).map(|i| 1.0 + i as f64 * 0.1).collect(),
            degenerate: (0..FAU_INTENSITY_COLS).map(|i| i == 3).collect(),
        };
        scaler.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("[[columns]]").count(), FAU_INTENSITY_COLS);
        assert_eq!(FauScaler::load(&path).unwrap(), scaler);
    }

    #[test]
    fn patient_offset_mapping_walks_pieces() {
        let span = SegmentSpan {
            index: 0,
            patient_start: 0.0,
            pieces: vec![
                TimeInterval { start: 10.0, stop: 13.0 },
                TimeInterval { start: 20.0, stop: 25.0 },
            ],
        };
        assert!((patient_offset_to_original(&span, 0.0) - 10.0).abs() < 1e-12);
        assert!((patient_offset_to_original(&span, 2.9) - 12.9).abs() < 1e-12);
        assert!((patient_offset_to_original(&span, 3.5) - 20.5).abs() < 1e-12);
        assert!((patient_offset_to_original(&span, 8.5) - 25.0).abs() < 1e-12);
    }
}
