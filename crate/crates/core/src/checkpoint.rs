//! "LBR1" checkpoints: magic, little-endian `u32` version and header
//! length, a UTF-8 text header, then every tensor as little-endian `f32`
//! in header order.
//!
//! Header lines:
//!
//! ```text
//! step 120
//! config_hash 3f9a...
//! model {"vocab_size":512,...}
//! optimizer_step 120
//! tensor tok_emb 512x128
//! moment1 tok_emb 512x128
//! moment2 tok_emb 512x128
//! ```
//!
//! `optimizer_step` and the moment lines are present only when optimizer
//! state was saved.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LBR1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("unexpected end of checkpoint")]
    Truncated,
    #[error("trailing bytes after checkpoint data")]
    Trailing,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for tensor {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Saved Adam moments, aligned with [`Checkpoint::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub step: u64,
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &TransformerModel<f32>, step: u64, config_hash: &str) -> Self {
        Self {
            model_config: *model.config(),
            step,
            config_hash: config_hash.to_string(),
            tensors: model
                .param_names()
                .iter()
                .cloned()
                .zip(model.params().iter().cloned())
                .collect(),
            optimizer: None,
        }
    }

    /// Rebuilds the model, checking names and shapes against the registry
    /// of `expected` (or the checkpoint's own config).
    pub fn to_model(
        &self,
        expected: Option<&ModelConfig>,
    ) -> Result<TransformerModel<f32>, CheckpointError> {
        let config = expected.copied().unwrap_or(self.model_config);
        let specs = config.parameter_specs();
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in &specs {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
            params.push(t.clone());
        }
        if let Some((extra, _)) = self
            .tensors
            .iter()
            .find(|(n, _)| !specs.iter().any(|(s, _)| s == n))
        {
            return Err(CheckpointError::UnexpectedTensor(extra.clone()));
        }
        TransformerModel::from_parts(config, params)
            .map_err(|e| CheckpointError::Header(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape_str = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let mut header = format!(
            "step {}\nconfig_hash {}\nmodel {}\n",
            self.step,
            self.config_hash,
            serde_json::to_string(&self.model_config).expect("model config serializes")
        );
        if let Some(o) = &self.optimizer {
            header.push_str(&format!("optimizer_step {}\n", o.step));
        }
        for (name, t) in &self.tensors {
            header.push_str(&format!("tensor {name} {}\n", shape_str(t.shape())));
        }
        if let Some(o) = &self.optimizer {
            for (kind, ts) in [("moment1", &o.first), ("moment2", &o.second)] {
                for ((name, _), t) in self.tensors.iter().zip(ts.iter()) {
                    header.push_str(&format!("{kind} {name} {}\n", shape_str(t.shape())));
                }
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let mut push = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.tensors.iter().for_each(|(_, t)| push(t));
        if let Some(o) = &self.optimizer {
            o.first.iter().chain(&o.second).for_each(&mut push);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = cur.u32()? as usize;
        let header = std::str::from_utf8(cur.take(header_len)?)
            .map_err(|_| CheckpointError::Header("header is not UTF-8".into()))?;

        let bad = |line: &str| CheckpointError::Header(format!("bad line {line:?}"));
        let mut step = None;
        let mut hash = None;
        let mut model = None;
        let mut opt_step = None;
        let mut shapes: [Vec<(String, Vec<usize>)>; 3] = Default::default();
        for line in header.lines() {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            match key {
                "step" => step = Some(rest.parse::<u64>().map_err(|_| bad(line))?),
                "config_hash" => hash = Some(rest.to_string()),
                "model" => {
                    model = Some(serde_json::from_str::<ModelConfig>(rest).map_err(|_| bad(line))?)
                }
                "optimizer_step" => opt_step = Some(rest.parse::<u64>().map_err(|_| bad(line))?),
                "tensor" | "moment1" | "moment2" => {
                    let (name, shape) = rest.split_once(' ').ok_or_else(|| bad(line))?;
                    let shape = shape
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(line))?;
                    let slot = match key {
                        "tensor" => 0,
                        "moment1" => 1,
                        _ => 2,
                    };
                    shapes[slot].push((name.to_string(), shape));
                }
                _ => return Err(bad(line)),
            }
        }
        let missing = |what: &str| CheckpointError::Header(format!("missing {what}"));
        let mut read = |specs: &[(String, Vec<usize>)]| -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
            specs
                .iter()
                .map(|(name, shape)| {
                    let n: usize = shape.iter().product();
                    let raw = cur.take(n * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    let t = Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::Header(e.to_string()))?;
                    Ok((name.clone(), t))
                })
                .collect()
        };
        let tensors = read(&shapes[0])?;
        let optimizer = match opt_step {
            Some(s) => {
                let strip = |v: Vec<(String, Tensor<f32>)>| v.into_iter().map(|(_, t)| t).collect();
                let first = strip(read(&shapes[1])?);
                let second = strip(read(&shapes[2])?);
                Some(OptimizerState {
                    step: s,
                    first,
                    second,
                })
            }
            None => None,
        };
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Trailing);
        }
        Ok(Self {
            model_config: model.ok_or_else(|| missing("model"))?,
            step: step.ok_or_else(|| missing("step"))?,
            config_hash: hash.ok_or_else(|| missing("config_hash"))?,
            tensors,
            optimizer,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    checkpoint: &Checkpoint,
) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
