//! Checkpoint files: a magic string, a JSON header describing the model
//! configuration and parameter layout, then the raw little-endian f64
//! payload in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::{Tensor, TensorError};

const MAGIC: &[u8; 8] = b"MXCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub valid_loss: f64,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    cfg: ModelConfig,
    meta: CheckpointMeta,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub meta: CheckpointMeta,
    /// (name, shape, data), in the model's parameter visit order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            cfg: model.cfg.clone(),
            meta,
            params: model
                .param_snapshot()
                .into_iter()
                .map(|(name, data, shape)| (name, shape, data))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            version: 1,
            cfg: self.cfg.clone(),
            meta: self.meta.clone(),
            entries: self
                .params
                .iter()
                .map(|(name, shape, _)| Entry { name: name.clone(), shape: shape.clone() })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, shape, data) in &self.params {
            let expect: usize = shape.iter().product();
            if data.len() != expect {
                return Err(CheckpointError::Malformed(format!(
                    "entry data length {} does not match shape {shape:?}",
                    data.len()
                )));
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Malformed("bad magic".into()));
        }
        let mut len_bytes = [0u8; 4];
        r.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.version != 1 {
            return Err(CheckpointError::Malformed(format!("unknown version {}", header.version)));
        }
        let mut params = Vec::with_capacity(header.entries.len());
        for entry in header.entries {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.push((entry.name, entry.shape, data));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CheckpointError::Malformed("trailing bytes after payload".into()));
        }
        Ok(Checkpoint { cfg: header.cfg, meta: header.meta, params })
    }

    /// Installs these parameters into `model`; every parameter must match by
    /// name and shape, in any order, with none missing or extra.
    pub fn install(&self, model: &mut Model) -> Result<()> {
        if self.cfg != model.cfg {
            return Err(CheckpointError::Mismatch(
                "model configuration differs from the checkpoint header".into(),
            ));
        }
        let mut by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> = self
            .params
            .iter()
            .map(|(name, shape, data)| (name.as_str(), (shape, data)))
            .collect();
        if by_name.len() != self.params.len() {
            return Err(CheckpointError::Malformed("duplicate parameter names".into()));
        }
        let mut error: Option<CheckpointError> = None;
        model.visit_params_mut(&mut |name, t| {
            if error.is_some() {
                return;
            }
            match by_name.remove(name.as_str()) {
                Some((shape, data)) if shape == t.shape() => {
                    *t = Tensor::param(data.clone(), shape).expect("shape checked");
                }
                Some((shape, _)) => {
                    error = Some(CheckpointError::Mismatch(format!(
                        "{name}: checkpoint shape {shape:?} vs model {:?}",
                        t.shape()
                    )));
                }
                None => {
                    error = Some(CheckpointError::Mismatch(format!("missing parameter {name}")));
                }
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(CheckpointError::Mismatch(format!("unknown parameter {extra}")));
        }
        Ok(())
    }

    /// Builds a fresh model from the stored configuration and parameters.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.cfg.clone(), 0)?;
        self.install(&mut model)?;
        Ok(model)
    }
}

/// Parameter-wise arithmetic mean of checkpoints with identical layouts.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| CheckpointError::Malformed("nothing to average".into()))?;
    let mut avg = first.clone();
    avg.meta.label = format!("average-of-{}", checkpoints.len());
    for other in &checkpoints[1..] {
        if other.params.len() != avg.params.len() {
            return Err(CheckpointError::Mismatch("parameter counts differ".into()));
        }
        for ((name, shape, acc), (oname, oshape, odata)) in
            avg.params.iter_mut().zip(&other.params)
        {
            if name != oname || shape != oshape {
                return Err(CheckpointError::Mismatch(format!(
                    "layout differs at {name} vs {oname}"
                )));
            }
            for (a, o) in acc.iter_mut().zip(odata) {
                *a += o;
            }
        }
    }
    let k = checkpoints.len() as f64;
    for (_, _, data) in &mut avg.params {
        for v in data {
            *v /= k;
        }
    }
    Ok(avg)
}
