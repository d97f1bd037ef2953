//! Checkpoint container: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then raw little-endian tensor data.
//!
//! The header is `{"meta": <caller JSON>, "tensors": [{"name", "dtype",
//! "shape", "offset", "len"}]}` with offsets in bytes from the start of the
//! data section. Tensors are written in name order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SKGCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub fn save<M: Serialize>(path: &Path, meta: &M, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut sorted: Vec<&(String, Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (name, t) in sorted {
        let t = t.flatten_all()?;
        let bytes: Vec<u8> = match t.dtype() {
            DType::F64 => t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            _ => t.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        let dtype = if t.dtype() == DType::F64 { "f64" } else { "f32" };
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: dtype.into(),
            shape: tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.dims().to_vec()).unwrap_or_default(),
            offset: data.len(),
            len: bytes.len(),
        });
        data.extend_from_slice(&bytes);
    }
    let header = serde_json::to_vec(&Header { meta, tensors: entries })?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |b: &[u8]| f.write_all(b).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    write(&data)?;
    Ok(())
}

pub struct Loaded<M> {
    pub meta: M,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<Loaded<M>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(&e.to_string()))?;
    let data = &bytes[header_end..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let raw = data.get(e.offset..e.offset + e.len).ok_or_else(|| bad("truncated tensor data"))?;
        let t = match e.dtype.as_str() {
            "f64" => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            "f32" => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(bad(&format!("unknown dtype {other}"))),
        };
        tensors.insert(e.name, t);
    }
    Ok(Loaded { meta: header.meta, tensors })
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.skg");
        let a = Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[1e-300f64, 3.0], &Device::Cpu).unwrap();
        save(&p, &serde_json::json!({"k": 1}), &[("z".into(), a.clone()), ("a".into(), b.clone())]).unwrap();
        let l: Loaded<serde_json::Value> = load(&p).unwrap();
        assert_eq!(l.meta["k"], 1);
        assert_eq!(l.tensors["z"].to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
        assert_eq!(l.tensors["a"].to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        std::fs::write(&p, b"garbage").unwrap();
        assert!(load::<serde_json::Value>(&p).is_err());
    }
}
