//! Dataset cache: `BCDS`, a little-endian u32 header length, a JSON header,
//! then `count·dim` little-endian f64 inputs and `count` little-endian u32
//! labels.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model_io::write_atomic;
use super::LabeledDataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BCDS";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format_version: u32,
    name: String,
    count: usize,
    dim: usize,
    num_classes: usize,
    inputs: String,
    labels: String,
}

pub fn save_dataset_cache(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::to_vec(&CacheHeader {
        format_version: CACHE_VERSION,
        name: ds.name().to_string(),
        count: ds.len(),
        dim: ds.dim(),
        num_classes: ds.num_classes(),
        inputs: "f64le".into(),
        labels: "u32le".into(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + ds.len() * (ds.dim() * 8 + 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in ds.inputs().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in ds.labels() {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    write_atomic(path.as_ref(), &out)
}

pub fn load_dataset_cache(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |offset: usize, reason: &str| Error::Parse {
        path: path.to_path_buf(),
        offset,
        reason: reason.to_string(),
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(parse_err(0, "missing BCDS magic"));
    }
    let hlen = bytes
        .get(4..8)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| parse_err(4, "truncated header length"))?;
    let header: CacheHeader =
        serde_json::from_slice(bytes.get(8..8 + hlen).ok_or_else(|| parse_err(8, "truncated header"))?)?;
    if header.format_version != CACHE_VERSION || header.inputs != "f64le" || header.labels != "u32le" {
        return Err(parse_err(8, "unsupported cache version or dtype"));
    }
    let body = 8 + hlen;
    let n_in = header.count * header.dim;
    let expected = body + n_in * 8 + header.count * 4;
    if bytes.len() != expected {
        return Err(parse_err(bytes.len().min(expected), &format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let inputs: Vec<f64> = bytes[body..body + n_in * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels: Vec<usize> = bytes[body + n_in * 8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let inputs = Array2::from_shape_vec((header.count, header.dim), inputs).expect("sized above");
    LabeledDataset::new(header.name, inputs, labels, header.num_classes)
}
