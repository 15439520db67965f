//! Checkpoint files: one JSON header line naming every tensor and its shape,
//! then the tensors as consecutive little-endian `f64` blocks.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetError, Result};
use crate::autodiff::Tensor;

pub const FORMAT: &str = "app2s-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f64".into(),
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header is serialisable");
    out.push(b'\n');
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| NetError::Checkpoint(msg);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION || header.dtype != "f64" {
        return Err(bad(format!(
            "unsupported format {} v{} ({})",
            header.format, header.version, header.dtype
        )));
    }
    let mut offset = nl + 1;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let [rows, cols] = entry.shape;
        let n = rows * cols;
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(bad(format!(
                "tensor `{}` truncated at byte offset {offset}",
                entry.name
            )));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(rows, cols, data).map_err(|e| bad(e.to_string()))?;
        tensors.push((entry.name, t));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after offset {offset}",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let ckpt = Checkpoint {
            meta: serde_json::json!({"k": 1}),
            tensors: vec![
                ("a".into(), Tensor::new(2, 2, vec![0.1, -3.5, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::zeros(0, 3)),
            ],
        };
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        assert!(decode_checkpoint(b"{}").is_err());
    }
}
