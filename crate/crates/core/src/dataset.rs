//! Dataset files: an NCHW input tensor in a tensor file, plus a sidecar of
//! little-endian `u32` labels, one per sample.

use std::fs;
use std::path::{Path, PathBuf};

use crate::engine::Batch;
use crate::error::{PtqError, Result};
use crate::tensor_io::{read_tensors, write_tensors, TensorStore};

/// Name of the input tensor inside a dataset file.
pub const INPUTS: &str = "inputs";

pub fn labels_path(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

pub fn write_dataset(path: &Path, batch: &Batch) -> Result<()> {
    let mut store = TensorStore::new();
    store.insert(INPUTS.into(), batch.inputs.clone());
    write_tensors(path, &store)?;
    if let Some(labels) = &batch.labels {
        let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        fs::write(labels_path(path), bytes)?;
    }
    Ok(())
}

/// Reads inputs and, when the sidecar exists, labels.
pub fn read_dataset(path: &Path) -> Result<Batch> {
    let mut store = read_tensors(path)?;
    let inputs = store
        .remove(INPUTS)
        .ok_or_else(|| PtqError::Missing(format!("{path:?} has no {INPUTS:?} tensor")))?;
    let lpath = labels_path(path);
    let labels = if lpath.exists() {
        let bytes = fs::read(&lpath)?;
        if bytes.len() % 4 != 0 {
            return Err(PtqError::Format(format!(
                "label file {lpath:?} length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        None
    };
    Batch::new(inputs, labels)
}
