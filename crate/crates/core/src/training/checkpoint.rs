//! `CLAD-CKPT v1`: one line of JSON manifest, a newline, then a raw
//! little-endian f32 blob holding parameters and Adam moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, EpochLoss, TrainState};
use crate::error::{CladError, Result};
use crate::losses::LossBreakdown;
use crate::model::{Architecture, Config, ModelParams};
use crate::numerics::Tensor;
use crate::rng::Rng;

pub const CHECKPOINT_FORMAT: &str = "CLAD-CKPT v1";
const DTYPE: &str = "f32le";

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    epochs_completed: usize,
    adam_step: u64,
    seed: u64,
    final_losses: Option<LossBreakdown>,
    history: Vec<EpochLoss>,
    rng: Rng,
    threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    dtype: String,
    config: Config,
    tensors: Vec<BlobEntry>,
    metadata: Metadata,
    blob_bytes: usize,
}

pub fn write_checkpoint(state: &TrainState) -> Vec<u8> {
    let groups: [(&str, Vec<&Tensor>); 3] = [
        ("", state.params.iter().map(|(_, t)| t).collect()),
        ("adam.m.", state.adam.m.iter().collect()),
        ("adam.v.", state.adam.v.iter().collect()),
    ];
    let names: Vec<&str> = state.params.iter().map(|(n, _)| n).collect();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (prefix, group) in &groups {
        for (name, t) in names.iter().zip(group) {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(BlobEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() - offset,
            });
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: DTYPE.into(),
        config: state.config.clone(),
        tensors,
        metadata: Metadata {
            epochs_completed: state.epoch,
            adam_step: state.adam.step,
            seed: state.config.seed,
            final_losses: state.history.last().map(|e| e.loss),
            history: state.history.clone(),
            rng: state.rng.clone(),
            threshold: state.threshold,
        },
        blob_bytes: blob.len(),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let corrupt = |msg: String| CladError::integrity(format!("checkpoint: {msg}"));
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..split]).map_err(|e| corrupt(format!("corrupt manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unsupported format {:?}", manifest.format)));
    }
    if manifest.dtype != DTYPE {
        return Err(corrupt(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let blob = &bytes[split + 1..];
    if blob.len() != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    manifest
        .config
        .validate()
        .map_err(|e| corrupt(format!("stored config rejected: {e}")))?;
    let arch = Architecture::from_config(&manifest.config);
    let layout = arch.layout();
    if manifest.tensors.len() != 3 * layout.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            3 * layout.len(),
            manifest.tensors.len()
        )));
    }
    let mut decoded = Vec::with_capacity(manifest.tensors.len());
    for (k, entry) in manifest.tensors.iter().enumerate() {
        let (name, shape) = &layout[k % layout.len()];
        let prefix = ["", "adam.m.", "adam.v."][k / layout.len()];
        if entry.name != format!("{prefix}{name}") || &entry.shape != shape {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match expected {prefix}{name} {:?}",
                entry.name, entry.shape, shape
            )));
        }
        let numel: usize = shape.iter().product();
        let end = entry.offset.checked_add(entry.bytes);
        if entry.bytes != 4 * numel || end.is_none_or(|e| e > blob.len()) {
            return Err(corrupt(format!("tensor {} has an invalid byte range", entry.name)));
        }
        let data: Vec<f32> = blob[entry.offset..entry.offset + entry.bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape.clone(), data)?;
        if !t.is_finite() {
            return Err(corrupt(format!("tensor {} holds non-finite values", entry.name)));
        }
        decoded.push(t);
    }
    let v = decoded.split_off(2 * layout.len());
    let m = decoded.split_off(layout.len());
    let params = ModelParams::from_tensors(arch, decoded)?;
    let meta = manifest.metadata;
    Ok(TrainState {
        config: manifest.config,
        params,
        adam: Adam {
            m,
            v,
            step: meta.adam_step,
        },
        epoch: meta.epochs_completed,
        rng: meta.rng,
        history: meta.history,
        threshold: meta.threshold,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(state)).map_err(|e| CladError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| CladError::io(path, e))?;
    read_checkpoint(&bytes)
}
