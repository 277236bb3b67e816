//! Model checkpoints: one line of JSON header, a newline, then every parameter
//! tensor as raw little-endian `f64` values in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use fovea_core::detector::{Detector, DetectorConfig};
use fovea_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

const FORMAT: &str = "fovea-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub config: DetectorConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a detector to bytes.
pub fn encode(detector: &Detector, epoch: usize) -> Vec<u8> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        epoch,
        config: detector.config().clone(),
        tensors: detector
            .param_names()
            .into_iter()
            .zip(detector.params())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for t in detector.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses bytes produced by [`encode`]; `path` is only used in errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Detector, usize)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).at(path)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut body = &bytes[split + 1..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if body.len() < n * 8 {
            return Err(bad(format!("truncated data for {}", entry.name)));
        }
        let (chunk, rest) = body.split_at(n * 8);
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::from_vec(&entry.shape, data)?);
        body = rest;
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    let detector = Detector::from_params(header.config, params)?;
    let names = detector.param_names();
    if let Some((want, got)) = names
        .iter()
        .zip(&header.tensors)
        .find(|(w, g)| **w != g.name)
    {
        return Err(bad(format!("tensor {} where {want} was expected", got.name)));
    }
    Ok((detector, header.epoch))
}

pub fn save(path: &Path, detector: &Detector, epoch: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&encode(detector, epoch)).at(path)
}

pub fn load(path: &Path) -> Result<(Detector, usize)> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, path)
}
