//! Binary parameter checkpoints.
//!
//! Layout: the 4-byte tag `AMT1`, a little-endian `u32` manifest length, a
//! UTF-8 JSON manifest, then the raw little-endian tensor data. Each manifest
//! entry records name, kind, shape, precision and byte offset (relative to
//! the start of the data block).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::scalar::{Precision, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"AMT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint whose tensors are still raw bytes.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    data: Vec<u8>,
}

impl Checkpoint {
    pub fn meta(&self) -> &serde_json::Value {
        &self.manifest.meta
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.manifest.tensors.iter().find(|e| e.name == name)
    }

    /// Tensor `name` decoded to `T` (widening or narrowing as needed).
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let bytes = &self.data[e.offset..e.offset + e.len];
        let values: Vec<T> = match e.precision {
            Precision::F32 => bytes.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            Precision::F64 => bytes.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        Ok(Tensor::from_vec(&e.shape, values))
    }

    /// Overwrites every parameter and buffer of `store` by name. Names and
    /// shapes must match exactly.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected = store.len() + store.buffers().len();
        if self.manifest.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {expected}",
                self.manifest.tensors.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name.clone();
            let t = self.tensor::<T>(&name)?;
            if t.shape() != store.get(id).value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    store.get(id).value.shape()
                )));
            }
            store.get_mut(id).value = t;
        }
        for k in 0..store.buffers().len() {
            let name = store.buffers()[k].0.clone();
            let id = store.find_buffer(&name).expect("own buffer");
            let t = self.tensor::<T>(&name)?;
            if t.shape() != store.buffer(id).shape() {
                return Err(Error::Checkpoint(format!("{name}: shape mismatch")));
            }
            *store.buffer_mut(id) = t;
        }
        Ok(())
    }
}

/// Serialises all parameters and buffers of `store` with `meta`.
pub fn encode<T: Scalar>(store: &ParamStore<T>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    let all = store
        .params()
        .iter()
        .map(|p| (p.name.as_str(), TensorKind::Param, &p.value))
        .chain(store.buffers().iter().map(|(n, t)| (n.as_str(), TensorKind::Buffer, t)));
    for (name, kind, t) in all {
        let offset = data.len();
        for &v in t.data() {
            v.write_le(&mut data);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            precision: T::PRECISION,
            offset,
            len: data.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        version: String::from_utf8_lossy(MAGIC).into_owned(),
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not an AMT1 checkpoint".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.version.as_bytes() != MAGIC {
        return Err(Error::Checkpoint(format!("unsupported version {:?}", manifest.version)));
    }
    let data = bytes[8 + len..].to_vec();
    for e in &manifest.tensors {
        if e.offset + e.len > data.len() || e.len != numel(&e.shape) * e.precision.bytes() {
            return Err(Error::Checkpoint(format!("{}: data out of range", e.name)));
        }
    }
    Ok(Checkpoint { manifest, data })
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(store, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::load(path, e.to_string()))
}
