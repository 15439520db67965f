//! Flat binary dataset files: a JSON header line, then per sample a `u32`
//! class id followed by `H * W * C` `f32` values, all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{to_f32_in_ball, Dataset, EpisodeError, Result};
use crate::geometry::{clip_to_ball, BallConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub n_samples: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub n_classes: usize,
}

pub fn encode_features(ds: &Dataset) -> Vec<u8> {
    let header = FileHeader {
        n_samples: ds.len(),
        h: ds.grid_h,
        w: ds.grid_w,
        c: ds.dim,
        n_classes: ds.n_classes,
    };
    let mut out = serde_json::to_vec(&header).expect("header is serialisable");
    out.push(b'\n');
    for i in 0..ds.len() {
        out.extend_from_slice(&ds.label(i).to_le_bytes());
        for v in ds.sample(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, line: Option<usize>, msg: impl Into<String>) -> EpisodeError {
    EpisodeError::Format {
        offset,
        line,
        msg: msg.into(),
    }
}

/// Parses a dataset file, clipping every patch into the ball of `cfg`.
pub fn decode_features(bytes: &[u8], cfg: &BallConfig) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(format_err(0, Some(1), "empty file"));
    }
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(bytes.len(), Some(1), "header line is not terminated"))?;
    let header: FileHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| format_err(e.column().saturating_sub(1), Some(1), format!("bad header: {e}")))?;
    let per = header.h * header.w * header.c;
    if per == 0 || header.n_classes == 0 {
        return Err(format_err(0, Some(1), "H, W, C and n_classes must be positive"));
    }
    let record = 4 + 4 * per;
    let body = &bytes[nl + 1..];
    if body.len() != header.n_samples * record {
        let whole = body.len() / record;
        let offset = nl + 1 + whole.min(header.n_samples) * record;
        return Err(format_err(
            offset,
            None,
            format!(
                "body has {} bytes, header promises {} samples of {record} bytes (C = {})",
                body.len(),
                header.n_samples,
                header.c
            ),
        ));
    }
    let mut labels = Vec::with_capacity(header.n_samples);
    let mut data = Vec::with_capacity(header.n_samples * per);
    let mut patch = Vec::with_capacity(header.c);
    for (s, rec) in body.chunks_exact(record).enumerate() {
        let offset = nl + 1 + s * record;
        let label = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes"));
        if label as usize >= header.n_classes {
            return Err(format_err(
                offset,
                None,
                format!("sample {s}: class id {label} >= n_classes {}", header.n_classes),
            ));
        }
        labels.push(label);
        for (p, chunk) in rec[4..].chunks_exact(4 * header.c).enumerate() {
            patch.clear();
            for (k, b) in chunk.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(format_err(
                        offset + 4 + 4 * (p * header.c + k),
                        None,
                        format!("sample {s}: non-finite value"),
                    ));
                }
                patch.push(v as f64);
            }
            if cfg.contains(&patch) {
                data.extend(patch.iter().map(|&v| v as f32));
            } else {
                data.extend(to_f32_in_ball(&clip_to_ball(&patch, cfg), cfg));
            }
        }
    }
    Dataset::new(header.h, header.w, header.c, header.n_classes, labels, data)
}

pub fn save_features(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_features(ds))?;
    Ok(())
}

pub fn load_features(path: &Path, cfg: &BallConfig) -> Result<Dataset> {
    decode_features(&std::fs::read(path)?, cfg)
}
