//! Model checkpoints: a small binary container holding the architecture
//! config (JSON header) followed by named parameter tensors, including
//! batch-norm running statistics.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "DSCK"
//! version u8       1
//! hdr_len u32      header byte count
//! header  JSON     { hyperparams, t_frames, metadata }
//! count   u32      tensor count
//! tensor  repeated name_len u16, name, rows u32, cols u32, rows*cols f64
//! ```

use super::model::{build_model, FusionModel};
use super::{FusionError, FusionHyperparams};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    hyperparams: FusionHyperparams,
    t_frames: usize,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A loaded checkpoint; `restore` rebuilds the model.
#[derive(Debug)]
pub struct Checkpoint {
    pub hyperparams: FusionHyperparams,
    pub t_frames: usize,
    /// Pipeline-owned extras (feature config, scaler, ...).
    pub metadata: serde_json::Value,
    tensors: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn restore(&self) -> Result<FusionModel, FusionError> {
        let mut model = build_model(&self.hyperparams, self.t_frames, 0)?;
        model.load_state_tensors(&self.tensors)?;
        Ok(model)
    }
}

fn ioerr(e: std::io::Error) -> FusionError {
    FusionError::Checkpoint(e.to_string())
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut FusionModel,
    metadata: serde_json::Value,
) -> Result<(), FusionError> {
    let header = Header {
        hyperparams: model.hyperparams.clone(),
        t_frames: model.t_frames,
        metadata,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let tensors = model.state_tensors();

    let mut file = std::fs::File::create(path).map_err(ioerr)?;
    file.write_all(MAGIC).map_err(ioerr)?;
    file.write_all(&[VERSION]).map_err(ioerr)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(ioerr)?;
    file.write_all(&header_bytes).map_err(ioerr)?;
    file.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(ioerr)?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        file.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(ioerr)?;
        file.write_all(name_bytes).map_err(ioerr)?;
        file.write_all(&(tensor.nrows() as u32).to_le_bytes()).map_err(ioerr)?;
        file.write_all(&(tensor.ncols() as u32).to_le_bytes()).map_err(ioerr)?;
        let mut buf = Vec::with_capacity(tensor.len() * 8);
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(ioerr)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FusionError> {
    let mut file = std::fs::File::open(path).map_err(ioerr)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(ioerr)?;
    if &magic != MAGIC {
        return Err(FusionError::Checkpoint("bad magic".into()));
    }
    let mut version = [0u8; 1];
    file.read_exact(&mut version).map_err(ioerr)?;
    if version[0] != VERSION {
        return Err(FusionError::Checkpoint(format!("unsupported version {}", version[0])));
    }
    let mut len4 = [0u8; 4];
    file.read_exact(&mut len4).map_err(ioerr)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    file.read_exact(&mut header_bytes).map_err(ioerr)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| FusionError::Checkpoint(format!("bad header: {e}")))?;

    file.read_exact(&mut len4).map_err(ioerr)?;
    let count = u32::from_le_bytes(len4) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        file.read_exact(&mut len2).map_err(ioerr)?;
        let mut name_bytes = vec![0u8; u16::from_le_bytes(len2) as usize];
        file.read_exact(&mut name_bytes).map_err(ioerr)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| FusionError::Checkpoint("tensor name is not utf-8".into()))?;
        file.read_exact(&mut len4).map_err(ioerr)?;
        let rows = u32::from_le_bytes(len4) as usize;
        file.read_exact(&mut len4).map_err(ioerr)?;
        let cols = u32::from_le_bytes(len4) as usize;
        let mut buf = vec![0u8; rows * cols * 8];
        file.read_exact(&mut buf).map_err(ioerr)?;
        let values: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        tensors.insert(name, tensor);
    }
    Ok(Checkpoint {
        hyperparams: header.hyperparams,
        t_frames: header.t_frames,
        metadata: header.metadata,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::SegmentBatch;
    use ndarray::{Array1, Array3};

    #[test]
    fn checkpoint_round_trips_predictions() {
        let h = FusionHyperparams {
            bilstm1_units: 3,
            dropout1: 0.0,
            bilstm2_units: 3,
            dropout2: 0.0,
            bilstm3_units: 3,
            dropout3: 0.0,
            n_dense: 4,
            fusion_bilstm_units: 3,
            fusion_dropout: 0.0,
            ..FusionHyperparams::default()
        };
        let mut model = build_model(&h, 5, 77).unwrap();
        let batch = SegmentBatch {
            mfcc: Array3::from_shape_fn((2, 5, 60), |(b, t, f)| {
                ((b + 2 * t + 3 * f) % 11) as f64 * 0.1 - 0.5
            }),
            fau: Array3::from_shape_fn((2, 240, 20), |(b, r, c)| {
                ((b + r + c) % 7) as f64 * 0.1
            }),
            llm: ndarray::Array2::from_shape_fn((2, 1), |(b, _)| b as f64),
            labels: Array1::from_vec(vec![1.0, 0.0]),
            interview_ids: vec![10, 11],
        };
        let before = model.predict(&batch).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dsck");
        save_checkpoint(&path, &mut model, serde_json::json!({"note": "test"})).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.t_frames, 5);
        assert_eq!(ckpt.metadata["note"], "test");
        let restored = ckpt.restore().unwrap();
        let after = restored.predict(&batch).unwrap();
        let max = before
            .iter()
            .zip(after.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dsck");
        std::fs::write(&path, b"NOPE____").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(FusionError::Checkpoint(_))));
    }
}
