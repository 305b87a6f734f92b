//! Checkpoint files.
//!
//! Layout: one line of JSON (the header), a `\n`, then every tensor as
//! little-endian `f32` in header order. The header lists each tensor's
//! name, shape, byte offset into the blob and element count, so the blob
//! can be read without the architecture code; loading still rebuilds the
//! architecture and checks the layout against it.
//!
//! ```text
//! {"format":"cotta-checkpoint","version":1,"architecture_id":"mlp-small",...}\n
//! <blob: f32 LE ...>
//! ```

use std::path::Path;

use cotta_core::nn::{BnBuffers, ModelState, Parameter};
use cotta_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "cotta-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub architecture_id: String,
    pub num_classes: usize,
    /// Seed the architecture was initialized with.
    pub init_seed: u64,
    pub provenance: Provenance,
    pub tensors: Vec<Entry>,
    pub blob_bytes: u64,
}

/// Where the weights came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_seed: u64,
    pub dataset_seed: u64,
    pub pretrain_seed: u64,
    pub pretrain_epochs: usize,
    /// Clean held-out error after pretraining, if measured.
    pub clean_test_error: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Parameter,
    NormAffine,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
}

pub fn to_bytes(model: &ModelState, provenance: &Provenance) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: String, kind: EntryKind, shape: Vec<usize>, data: &[f32]| {
        tensors.push(Entry { name, kind, shape, offset: blob.len() as u64, len: data.len() as u64 });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.parameters() {
        let kind = if p.is_norm_affine { EntryKind::NormAffine } else { EntryKind::Parameter };
        push(p.name.clone(), kind, p.value.shape().to_vec(), p.value.data());
    }
    for b in model.bn_buffers() {
        let n = b.running_mean.len();
        push(format!("{}.running_mean", b.layer), EntryKind::RunningMean, vec![n], &b.running_mean);
        push(format!("{}.running_var", b.layer), EntryKind::RunningVar, vec![n], &b.running_var);
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        architecture_id: model.architecture_id().into(),
        num_classes: model.num_classes(),
        init_seed: model.seed(),
        provenance: provenance.clone(),
        tensors,
        blob_bytes: blob.len() as u64,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

/// Parses a checkpoint; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(ModelState, Header)> {
    let bad = |msg: String| CliError::format(path, msg);
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("no checkpoint header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!("unsupported checkpoint format {} v{}", header.format, header.version)));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() as u64 != header.blob_bytes {
        return Err(bad(format!("blob is {} bytes, header says {}", blob.len(), header.blob_bytes)));
    }
    let read = |e: &Entry| -> Result<Vec<f32>> {
        let expect: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.len * 4).filter(|&end| end <= blob.len() as u64);
        match end {
            Some(end) if expect as u64 == e.len => Ok(blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()),
            _ => Err(bad(format!("tensor {} has an inconsistent shape or range", e.name))),
        }
    };

    let mut parameters = Vec::new();
    let mut buffers: Vec<BnBuffers> = Vec::new();
    for e in &header.tensors {
        let data = read(e)?;
        match e.kind {
            EntryKind::Parameter | EntryKind::NormAffine => parameters.push(Parameter {
                name: e.name.clone(),
                value: Tensor::new(&e.shape, data)?,
                is_norm_affine: e.kind == EntryKind::NormAffine,
            }),
            EntryKind::RunningMean => {
                let layer = e.name.strip_suffix(".running_mean").ok_or_else(|| bad(format!("bad buffer name {}", e.name)))?;
                buffers.push(BnBuffers { layer: layer.into(), running_mean: data, running_var: Vec::new() });
            }
            EntryKind::RunningVar => {
                let layer = e.name.strip_suffix(".running_var").ok_or_else(|| bad(format!("bad buffer name {}", e.name)))?;
                match buffers.last_mut() {
                    Some(b) if b.layer == layer && b.running_var.is_empty() => b.running_var = data,
                    _ => return Err(bad(format!("{} does not follow its running mean", e.name))),
                }
            }
        }
    }
    let model = ModelState::from_parts(&header.architecture_id, header.num_classes, header.init_seed, parameters, buffers)?;
    Ok((model, header))
}

pub fn save(model: &ModelState, provenance: &Provenance, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(model, provenance)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelState, Header)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes, path)
}
