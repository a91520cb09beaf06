//! Flat binary tensor archive.
//!
//! Layout: the 5-byte magic `DDLM1`, a little-endian `u64` manifest length,
//! the JSON manifest, then the tensor payload. The manifest records the
//! archive kind, element dtype, a config snapshot, free-form metadata, and
//! for each tensor its name, `[rows, cols]` shape and byte offset into the
//! payload. Elements are little-endian in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::scalar::Scalar;
use crate::util::write_atomic;

pub const MAGIC: &[u8; 5] = b"DDLM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded archive. Tensors are widened to `f64`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Array2<f64>)>,
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    kind: &str,
    config: &impl Serialize,
    meta: &impl Serialize,
    tensors: &[(String, &Array2<T>)],
) -> Result<()> {
    let elem = std::mem::size_of::<T>() as u64;
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, a) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: [a.nrows(), a.ncols()], offset });
        offset += a.len() as u64 * elem;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_owned(),
        dtype: T::DTYPE.to_owned(),
        config: serde_json::to_value(config)?,
        meta: serde_json::to_value(meta)?,
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(13 + header.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, a) in tensors {
        for &v in a.iter() {
            v.write_le(&mut bytes);
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint { path: path.to_owned(), msg: msg.to_owned() };
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(bad("missing DDLM1 header"));
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let data_start = 13usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[13..data_start]).map_err(|e| bad(&format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", manifest.format_version)));
    }
    let elem = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(&format!("unsupported dtype {other}"))),
    };
    let data = &bytes[data_start..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start + n * elem;
        let raw = data.get(start..end).ok_or_else(|| bad(&format!("tensor {} out of bounds", t.name)))?;
        let vals: Vec<f64> = if elem == 4 {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        } else {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), vals).map_err(|e| bad(&e.to_string()))?;
        tensors.push((t.name.clone(), arr));
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    pub fn kind(&self) -> &str {
        &self.manifest.kind
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn tensor_as<T: Scalar>(&self, name: &str) -> Result<Array2<T>> {
        self.tensor(name)
            .map(|a| a.mapv(T::of))
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))
    }

    /// Copies every parameter of `target` from the tensor named
    /// `prefix.<param name>`, checking shapes.
    pub fn load_into<T: Scalar, P: Parameters<T>>(&self, prefix: &str, target: &mut P) -> Result<()> {
        for (name, dst) in target.named_mut() {
            let full = if prefix.is_empty() { name } else { format!("{prefix}.{name}") };
            let src = self.tensor(&full).ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {full}")))?;
            if src.dim() != dst.dim() {
                return Err(Error::invalid(format!("tensor {full}: shape {:?} != expected {:?}", src.dim(), dst.dim())));
            }
            dst.zip_mut_with(src, |d, &s| *d = T::of(s));
        }
        Ok(())
    }
}
