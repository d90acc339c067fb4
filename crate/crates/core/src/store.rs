//! Feature store: one binary tensor file per feature matrix plus a
//! corpus-level CSV manifest.
//!
//! Tensor file layout, little-endian:
//!
//! ```text
//! magic   4 bytes  "DSTN"
//! version u8       1
//! rows    u32
//! cols    u32
//! data    rows*cols f32, row-major
//! ```
//!
//! Manifest columns: `interview_id,segment_index,tag,label,mfcc_file,fau_file`.
//! MFCC files exist per (segment, tag); the seven augmented variants of a
//! segment share one FAU file.

use crate::audiofeat::AugmentTag;
use crate::corpus::Label;
use crate::eval::{EvalDataset, InterviewFeatures, SegmentFeature};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"DSTN";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} is not a feature tensor file")]
    BadMagic { path: PathBuf },
    #[error("malformed manifest {path} line {line}: {msg}")]
    MalformedManifest { path: PathBuf, line: usize, msg: String },
    #[error("store has no verdict bit for interview {0}")]
    MissingVerdict(u32),
}

fn ioerr(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes a matrix as 32-bit floats.
pub fn write_tensor(path: &Path, values: &Array2<f64>) -> Result<(), StoreError> {
    let mut file = std::fs::File::create(path).map_err(ioerr(path))?;
    file.write_all(MAGIC).map_err(ioerr(path))?;
    file.write_all(&[VERSION]).map_err(ioerr(path))?;
    file.write_all(&(values.nrows() as u32).to_le_bytes()).map_err(ioerr(path))?;
    file.write_all(&(values.ncols() as u32).to_le_bytes()).map_err(ioerr(path))?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    file.write_all(&buf).map_err(ioerr(path))
}

/// Reads a tensor back (f32 storage widened to f64).
pub fn read_tensor(path: &Path) -> Result<Array2<f64>, StoreError> {
    let mut file = std::fs::File::open(path).map_err(ioerr(path))?;
    let mut head = [0u8; 5];
    file.read_exact(&mut head).map_err(ioerr(path))?;
    if &head[..4] != MAGIC || head[4] != VERSION {
        return Err(StoreError::BadMagic { path: path.to_path_buf() });
    }
    let mut len4 = [0u8; 4];
    file.read_exact(&mut len4).map_err(ioerr(path))?;
    let rows = u32::from_le_bytes(len4) as usize;
    file.read_exact(&mut len4).map_err(ioerr(path))?;
    let cols = u32::from_le_bytes(len4) as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    file.read_exact(&mut buf).map_err(ioerr(path))?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|_| StoreError::BadMagic { path: path.to_path_buf() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub interview_id: u32,
    pub segment_index: usize,
    pub tag: AugmentTag,
    pub label: Label,
    pub mfcc_file: String,
    pub fau_file: String,
}

/// A feature store rooted at one directory.
#[derive(Debug)]
pub struct FeatureStore {
    root: PathBuf,
    rows: Vec<ManifestRow>,
}

impl FeatureStore {
    /// Creates (or truncates) a store directory for writing.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(ioerr(&root))?;
        Ok(FeatureStore { root, rows: Vec::new() })
    }

    /// Opens an existing store and reads its manifest.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let manifest = root.join("manifest.csv");
        let text = std::fs::read_to_string(&manifest).map_err(ioerr(&manifest))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |msg: &str| StoreError::MalformedManifest {
                path: manifest.clone(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            rows.push(ManifestRow {
                interview_id: parts[0].parse().map_err(|_| bad("bad interview id"))?,
                segment_index: parts[1].parse().map_err(|_| bad("bad segment index"))?,
                tag: parts[2].parse().map_err(|_| bad("bad tag"))?,
                label: match parts[3] {
                    "1" => Label::Depressed,
                    "0" => Label::NotDepressed,
                    _ => return Err(bad("bad label bit")),
                },
                mfcc_file: parts[4].to_string(),
                fau_file: parts[5].to_string(),
            });
        }
        Ok(FeatureStore { root, rows })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    /// Writes one (segment, tag) pair. The FAU block is stored once per
    /// segment; repeated calls for other tags of the same segment reuse it.
    pub fn write_segment(
        &mut self,
        interview_id: u32,
        segment_index: usize,
        tag: AugmentTag,
        label: Label,
        mfcc: &Array2<f64>,
        fau: &Array2<f64>,
    ) -> Result<(), StoreError> {
        let mfcc_file = format!("{interview_id}_{segment_index}_{tag}.mfcc");
        let fau_file = format!("{interview_id}_{segment_index}.fau");
        write_tensor(&self.root.join(&mfcc_file), mfcc)?;
        let fau_path = self.root.join(&fau_file);
        if !fau_path.exists() {
            write_tensor(&fau_path, fau)?;
        }
        self.rows.push(ManifestRow {
            interview_id,
            segment_index,
            tag,
            label,
            mfcc_file,
            fau_file,
        });
        Ok(())
    }

    /// Persists the manifest; call once after all segments are written.
    pub fn save_manifest(&self) -> Result<(), StoreError> {
        let path = self.root.join("manifest.csv");
        let mut text = String::from("interview_id,segment_index,tag,label,mfcc_file,fau_file\n");
        for r in &self.rows {
            let bit = match r.label {
                Label::Depressed => 1,
                Label::NotDepressed => 0,
            };
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.interview_id, r.segment_index, r.tag, bit, r.mfcc_file, r.fau_file
            ));
        }
        std::fs::write(&path, text).map_err(ioerr(&path))
    }

    /// Loads the full store into an evaluation dataset, merging in per-
    /// interview text-verdict bits.
    pub fn load_dataset(&self, llm_bits: &BTreeMap<u32, f64>) -> Result<EvalDataset, StoreError> {
        let mut by_interview: BTreeMap<u32, InterviewFeatures> = BTreeMap::new();
        for r in &self.rows {
            let llm_bit = *llm_bits
                .get(&r.interview_id)
                .ok_or(StoreError::MissingVerdict(r.interview_id))?;
            let entry = by_interview.entry(r.interview_id).or_insert_with(|| InterviewFeatures {
                id: r.interview_id,
                label: r.label,
                llm_bit,
                segments: Vec::new(),
            });
            entry.segments.push(SegmentFeature {
                segment_index: r.segment_index,
                tag: r.tag,
                mfcc: read_tensor(&self.root.join(&r.mfcc_file))?,
                fau_raw: read_tensor(&self.root.join(&r.fau_file))?,
            });
        }
        Ok(EvalDataset { interviews: by_interview.into_values().collect() })
    }
}
