//! Versioned binary container for weights, optimizer buffers and run state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order. The
//! header is serialized from sorted maps so that identical state always
//! yields identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UNSHDWCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `meta` plus `tensors` (stored as `f32`) to `path`. The file is
/// written to a sibling temp path and renamed, so an interrupted save never
/// clobbers the previous checkpoint.
pub fn save(path: &Path, meta: &Value, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for t in tensors.values() {
            let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for v in flat {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a container written by [`save`].
pub fn load(path: &Path, device: &Device) -> Result<(Value, BTreeMap<String, Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{} is truncated", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = u64::from_le_bytes(u64b) as usize;
    let mut hb = vec![0u8; len];
    r.read_exact(&mut hb)
        .map_err(|_| Error::Checkpoint("header is truncated".into()))?;
    let header: Header = serde_json::from_slice(&hb)?;
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("tensor `{}` is truncated", entry.name)))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(entry.name, Tensor::from_vec(data, entry.shape, device)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", rest.len())));
    }
    Ok((header.meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Value, BTreeMap<String, Tensor>) {
        let dev = Device::Cpu;
        let mut t = BTreeMap::new();
        t.insert("b.w".to_string(), Tensor::new(&[[1.5f32, -2.0], [0.1, 3.0]], &dev).unwrap());
        t.insert("a.bias".to_string(), Tensor::new(&[0.25f32], &dev).unwrap());
        let meta = serde_json::json!({"epoch": 3, "losses": [0.1, 1e-7, 2.5e10]});
        (meta, t)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, t) = sample();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        save(&p1, &meta, &t).unwrap();
        let (meta2, t2) = load(&p1, &Device::Cpu).unwrap();
        assert_eq!(meta, meta2);
        save(&p2, &meta2, &t2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(
            t2["b.w"].to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.1, 3.0]]
        );
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&p, &Device::Cpu), Err(Error::Checkpoint(_))));
        let (meta, t) = sample();
        save(&p, &meta, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load(&p, &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
