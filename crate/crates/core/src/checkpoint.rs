//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `AMACKPT1`, a little-endian `u64` header length,
//! the JSON header, then every tensor's elements as little-endian floats in
//! header order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use ama_nn::{Scalar, Tensor};

use crate::config::ExperimentConfig;
use crate::model::{ModelSpec, Networks};
use crate::{AmaError, Result};

const MAGIC: &[u8; 8] = b"AMACKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    model: ModelSpec,
    epoch: usize,
    split_manifest: Option<String>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

/// Weights of all three networks with the run context they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Path of the split manifest this run used.
    pub split_manifest: Option<String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(nets: &Networks<T>, config: &ExperimentConfig, epoch: usize, split_manifest: Option<String>) -> Self {
        Self {
            config: config.clone(),
            model: nets.spec.clone(),
            epoch,
            split_manifest,
            tensors: nets.state(),
        }
    }

    /// Loads the stored state into `nets`, which must share the architecture.
    pub fn restore(&self, nets: &mut Networks<T>) -> Result<()> {
        if nets.spec != self.model {
            return Err(AmaError::contract("checkpoint architecture differs from the target networks"));
        }
        let map: HashMap<String, Tensor<T>> = self.tensors.iter().cloned().collect();
        nets.load_state(&map)
    }

    /// Fresh networks holding this checkpoint's state, in evaluation mode.
    pub fn networks(&self) -> Result<Networks<T>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut nets = Networks::new(self.model.clone(), &mut rng)?;
        self.restore(&mut nets)?;
        nets.eval();
        Ok(nets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            split_manifest: self.split_manifest.clone(),
            dtype: T::DTYPE.to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(16 + json.len() + self.tensors.iter().map(|(_, t)| t.len() * 8).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                match T::DTYPE {
                    "f32" => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    _ => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| AmaError::io(dir, e))?;
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| AmaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| AmaError::io(path, e))?;
        let bad = |m: &str| AmaError::data(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(bad(&format!("archive holds {} data, expected {}", header.dtype, T::DTYPE)));
        }
        let width = if header.dtype == "f32" { 4 } else { 8 };
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(pos..pos + n * width).ok_or_else(|| bad("truncated tensor data"))?;
            pos += n * width;
            let data = raw
                .chunks_exact(width)
                .map(|c| {
                    T::from_f64_lossy(if width == 4 {
                        f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                    } else {
                        f64::from_le_bytes(c.try_into().expect("8 bytes"))
                    })
                })
                .collect();
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            config: header.config,
            model: header.model,
            epoch: header.epoch,
            split_manifest: header.split_manifest,
            tensors,
        })
    }
}
