//! `PEARLCKPT1` container: magic, little-endian u64 header length, JSON header, then raw
//! little-endian arrays in header order (parameters first, then optimizer state).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::ModelMeta;
use super::optim::OptimizerConfig;
use super::Stage;
use crate::error::{Error, Result};
use crate::nets::{NetworkSpec, ParamArray, ParameterStore, Provenance};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"PEARLCKPT1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: OptimizerConfig,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: u64,
    pub spec_hash: String,
    pub dtype: Dtype,
    pub provenance: BTreeMap<String, String>,
    #[serde(default)]
    pub frozen: Vec<String>,
    /// Serialized data-order generator, for resuming.
    #[serde(default)]
    pub rng_state: Option<serde_json::Value>,
    pub model: ModelMeta,
    #[serde(default)]
    pub optimizers: BTreeMap<String, OptimizerMeta>,
    /// Resolved training configuration that produced the checkpoint.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub arrays: Vec<ArrayHeader>,
    #[serde(default)]
    pub state_arrays: Vec<ArrayHeader>,
}

/// Parameters, optimizer buffers and metadata of one training snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterStore,
    pub state: BTreeMap<String, ParamArray>,
}

impl Checkpoint {
    /// The parameters, after checking they were saved for `expected_hash`.
    pub fn params_for(&self, expected_hash: &str) -> Result<&ParameterStore> {
        if self.meta.spec_hash != expected_hash {
            return Err(Error::SpecHashMismatch {
                expected: expected_hash.to_string(),
                found: self.meta.spec_hash.clone(),
            });
        }
        Ok(&self.params)
    }

    /// Optimizer state arrays stored under `<group>.`, with the prefix removed.
    pub fn optimizer_state(&self, group: &str) -> BTreeMap<String, ParamArray> {
        let prefix = format!("{group}.");
        self.state
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }
}

/// Hash identifying the architecture of a (possibly multi-network) stage.
pub fn combined_spec_hash(specs: &[&NetworkSpec]) -> String {
    match specs {
        [one] => one.hash(),
        many => {
            use sha2::{Digest, Sha256};
            let joined: Vec<String> = many.iter().map(|s| s.hash()).collect();
            let digest = Sha256::digest(joined.join("+").as_bytes());
            digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
        }
    }
}

fn push_array(out: &mut Vec<u8>, data: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F32 => data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

/// Serialize a checkpoint; `meta.arrays`, `meta.state_arrays`, provenance and frozen
/// sections are filled from `params` and `state`.
pub fn encode_checkpoint(
    params: &ParameterStore,
    meta: &CheckpointMeta,
    state: &BTreeMap<String, ParamArray>,
) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.arrays = params
        .iter()
        .map(|(k, v)| ArrayHeader {
            name: k.clone(),
            shape: v.shape.clone(),
        })
        .collect();
    meta.state_arrays = state
        .iter()
        .map(|(k, v)| ArrayHeader {
            name: k.clone(),
            shape: v.shape.clone(),
        })
        .collect();
    meta.provenance = params
        .provenance()
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect();
    meta.frozen = params.frozen_sections().iter().cloned().collect();
    let header = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(header.len() + 18 + params.scalar_count() * meta.dtype.width());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in params.iter() {
        push_array(&mut out, &a.data, meta.dtype);
    }
    for a in state.values() {
        push_array(&mut out, &a.data, meta.dtype);
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterStore,
    meta: &CheckpointMeta,
    state: &BTreeMap<String, ParamArray>,
) -> Result<PathBuf> {
    let bytes = encode_checkpoint(params, meta, state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 18 || &bytes[..10] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a PEARLCKPT1 file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let body = 18usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[18..body])?;
    let width = meta.dtype.width();
    let mut pos = body;
    let mut read = |h: &ArrayHeader| -> Result<ParamArray> {
        let n: usize = h.shape.iter().product();
        let end = pos + n * width;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("truncated data for `{}`", h.name)));
        }
        let data = bytes[pos..end]
            .chunks_exact(width)
            .map(|c| match meta.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        pos = end;
        Ok(ParamArray {
            shape: h.shape.clone(),
            data,
        })
    };
    let mut params = ParameterStore::new();
    for h in &meta.arrays {
        let a = read(h)?;
        params.insert(h.name.clone(), a);
    }
    let mut state = BTreeMap::new();
    for h in &meta.state_arrays {
        state.insert(h.name.clone(), read(h)?);
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    for (section, p) in &meta.provenance {
        let p = Provenance::try_from(p.clone()).map_err(Error::Checkpoint)?;
        params.provenance_mut().insert(section.clone(), p);
    }
    params.frozen_mut().extend(meta.frozen.iter().cloned());
    Ok(Checkpoint { meta, params, state })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
