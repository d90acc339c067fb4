//! Dataset error manifest: a version-controlled data file describing the
//! known corrections a raw corpus needs before use — interruption trims,
//! transcript time offsets, label overrides, and interviews whose therapist
//! utterances had to be supplied externally.

use super::{quantize_centis, CorpusError, Interview, Label, SAMPLE_RATE};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Replacement (score, label) pair for an interview with a labeling error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelOverride {
    pub phq8_score: u8,
    pub label: Label,
}

/// Corrections to apply on top of a raw corpus, keyed by interview id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorManifest {
    /// Intervals (start, stop) in seconds to delete from audio, FAU track,
    /// and transcript.
    pub trims: BTreeMap<u32, Vec<(f64, f64)>>,
    /// Seconds to add to every utterance timestamp of an out-of-sync
    /// transcript.
    pub time_offsets: BTreeMap<u32, f64>,
    /// Corrected (phq8_score, label) pairs.
    pub label_overrides: BTreeMap<u32, LabelOverride>,
    /// Interviews whose therapist utterances are supplied as corrected
    /// transcript inputs rather than computed here.
    pub missing_therapist: BTreeSet<u32>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct ManifestFile {
    #[serde(default)]
    trims: BTreeMap<String, Vec<(f64, f64)>>,
    #[serde(default)]
    time_offsets: BTreeMap<String, f64>,
    #[serde(default)]
    label_overrides: BTreeMap<String, LabelOverride>,
    #[serde(default)]
    missing_therapist: Vec<u32>,
}

fn parse_id_key(key: &str, path: &Path) -> Result<u32, CorpusError> {
    key.parse().map_err(|_| CorpusError::MalformedCsv {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("manifest key {key:?} is not an interview id"),
    })
}

impl ErrorManifest {
    /// Reads the TOML manifest format and validates it.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                CorpusError::MissingFile(path.to_path_buf())
            } else {
                CorpusError::Io { path: path.to_path_buf(), source }
            }
        })?;
        let raw: ManifestFile = toml::from_str(&text).map_err(|e| CorpusError::MalformedCsv {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut manifest = ErrorManifest::default();
        for (k, v) in raw.trims {
            manifest.trims.insert(parse_id_key(&k, path)?, v);
        }
        for (k, v) in raw.time_offsets {
            manifest.time_offsets.insert(parse_id_key(&k, path)?, v);
        }
        for (k, v) in raw.label_overrides {
            manifest.label_overrides.insert(parse_id_key(&k, path)?, v);
        }
        manifest.missing_therapist = raw.missing_therapist.into_iter().collect();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = ManifestFile {
            trims: self.trims.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            time_offsets: self.time_offsets.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            label_overrides: self
                .label_overrides
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            missing_therapist: self.missing_therapist.iter().copied().collect(),
        };
        let text = toml::to_string_pretty(&file).expect("manifest serializes");
        std::fs::write(path, text)
            .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
    }

    /// Trim intervals must be well-formed and non-overlapping per interview;
    /// label overrides must respect the cut-off rule.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (&id, intervals) in &self.trims {
            let mut sorted = intervals.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in sorted.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(CorpusError::OverlappingTrims { id });
                }
            }
            if sorted.iter().any(|&(a, b)| a < 0.0 || b <= a) {
                return Err(CorpusError::IntervalOutOfRange(
                    sorted[0].0,
                    sorted[0].1,
                    f64::INFINITY,
                ));
            }
        }
        for (&id, o) in &self.label_overrides {
            if o.label != Label::from_phq8(o.phq8_score) {
                return Err(CorpusError::InconsistentOverride { id });
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.trims.is_empty()
            && self.time_offsets.is_empty()
            && self.label_overrides.is_empty()
            && self.missing_therapist.is_empty()
    }
}

/// Maps a timestamp through a set of sorted deletions: points inside a
/// deleted interval collapse to the interval's (shifted) start.
fn remap_time(t: f64, trims: &[(f64, f64)]) -> f64 {
    let mut removed_before = 0.0;
    for &(a, b) in trims {
        if t >= b {
            removed_before += b - a;
        } else if t > a {
            return a - removed_before;
        } else {
            break;
        }
    }
    t - removed_before
}

/// Applies the manifest entries for `interview.id`: deletes trim intervals
/// from waveform, FAU track, and transcript (shifting later timestamps),
/// shifts out-of-sync utterance timestamps, and applies label overrides.
/// The returned record satisfies every `Interview` invariant.
pub fn apply_error_manifest(
    mut interview: Interview,
    manifest: &ErrorManifest,
) -> Result<Interview, CorpusError> {
    let id = interview.id;
    let duration = interview.duration_secs();

    if let Some(&offset) = manifest.time_offsets.get(&id) {
        for u in &mut interview.utterances {
            u.start_time = quantize_centis((u.start_time + offset).max(0.0));
            u.stop_time = quantize_centis((u.stop_time + offset).min(duration));
        }
        interview.utterances.retain(|u| u.stop_time > u.start_time);
    }

    if let Some(intervals) = manifest.trims.get(&id) {
        let mut trims = intervals.clone();
        trims.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in trims.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CorpusError::OverlappingTrims { id });
            }
        }
        for &(a, b) in &trims {
            if a < 0.0 || b <= a || b > duration + 1e-9 {
                return Err(CorpusError::IntervalOutOfRange(a, b, duration));
            }
        }
        if !trims.is_empty() {
            let sr = SAMPLE_RATE as f64;
            let mut kept = Vec::with_capacity(interview.audio.len());
            let mut cursor = 0usize;
            for &(a, b) in &trims {
                let start = (a * sr).round() as usize;
                let stop = ((b * sr).round() as usize).min(interview.audio.len());
                kept.extend_from_slice(&interview.audio[cursor..start.min(interview.audio.len())]);
                cursor = stop;
            }
            kept.extend_from_slice(&interview.audio[cursor.min(interview.audio.len())..]);
            interview.audio = kept;

            interview.fau_track.retain(|f| {
                !trims.iter().any(|&(a, b)| f.timestamp >= a && f.timestamp < b)
            });
            for f in &mut interview.fau_track {
                f.timestamp = remap_time(f.timestamp, &trims);
            }

            for u in &mut interview.utterances {
                u.start_time = quantize_centis(remap_time(u.start_time, &trims));
                u.stop_time = quantize_centis(remap_time(u.stop_time, &trims));
            }
            interview.utterances.retain(|u| u.stop_time > u.start_time);
        }
    }

    if let Some(o) = manifest.label_overrides.get(&id) {
        if o.label != Label::from_phq8(o.phq8_score) {
            return Err(CorpusError::InconsistentOverride { id });
        }
        interview.phq8_score = o.phq8_score;
        interview.label = o.label;
    }

    interview.validate()?;
    Ok(interview)
}
