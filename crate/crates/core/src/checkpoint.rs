//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"CATPOL01"
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rows, u32 cols, rows*cols f64
//! u32 config length, UTF-8 config text
//! 32 bytes of generator state
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::config::{parse_train_config, train_config_text, ConfigError};
use crate::gradcore::Matrix;
use crate::policy::Policy;
use crate::rng::{self, Rng};
use crate::trainer::{TrainConfig, TrainError, ValueNet};

pub const MAGIC: &[u8; 8] = b"CATPOL01";
const POLICY_PREFIX: &str = "policy.";
const VALUE_PREFIX: &str = "value.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("file truncated in {0}")]
    Truncated(String),
    #[error("{0} is not valid UTF-8")]
    Utf8(String),
    #[error("duplicate tensor name {0:?}")]
    NameCollision(String),
    #[error("{0} trailing bytes after the generator state")]
    TrailingBytes(usize),
    #[error("{what} does not fit the format")]
    TooLarge { what: String },
    #[error("config echo: {0}")]
    Config(#[from] ConfigError),
    #[error("tensor {name:?}: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix)>,
    pub config: String,
    pub rng_state: [u8; 32],
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: impl FnOnce() -> String) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::TooLarge { what: what() })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::from(&MAGIC[..]);
    put_u32(&mut out, ck.tensors.len(), || "tensor count".into())?;
    for (name, m) in &ck.tensors {
        if !seen.insert(name.as_str()) {
            return Err(CheckpointError::NameCollision(name.clone()));
        }
        put_u32(&mut out, name.len(), || format!("name of tensor {name:?}"))?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows(), || format!("rows of tensor {name:?}"))?;
        put_u32(&mut out, m.cols(), || format!("cols of tensor {name:?}"))?;
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, ck.config.len(), || "config echo".into())?;
    out.extend_from_slice(ck.config.as_bytes());
    out.extend_from_slice(&ck.rng_state);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self, what: &dyn Fn() -> String) -> Result<String> {
        let len = self.u32(what)?;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Utf8(what()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len(), &|| "magic bytes".into())
        .map_err(|_| CheckpointError::BadMagic)?
        != MAGIC
    {
        return Err(CheckpointError::BadMagic);
    }
    let count = r.u32(&|| "tensor count".into())?;
    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    for i in 0..count {
        let name = r.text(&|| format!("name of tensor #{i}"))?;
        let what = || format!("tensor {name:?}");
        let rows = r.u32(&what)?;
        let cols = r.u32(&what)?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Truncated(what()))?;
        let raw = r.take(len, &what)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::NameCollision(name));
        }
        let m = Matrix::new(rows, cols, values).map_err(|e| CheckpointError::Tensor {
            name: name.clone(),
            msg: e.to_string(),
        })?;
        tensors.push((name, m));
    }
    let config = r.text(&|| "config echo".into())?;
    let state = r.take(32, &|| "generator state".into())?;
    if !r.bytes.is_empty() {
        return Err(CheckpointError::TrailingBytes(r.bytes.len()));
    }
    Ok(Checkpoint {
        tensors,
        config,
        rng_state: state.try_into().expect("32 bytes"),
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Trained models with the configuration that built them.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub config: TrainConfig,
    pub policy: Policy,
    pub value: ValueNet,
    pub rng: Rng,
}

impl Snapshot {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Matrix)> = self
            .policy
            .named_params()
            .into_iter()
            .map(|(n, m)| (format!("{POLICY_PREFIX}{n}"), m.clone()))
            .collect();
        tensors.extend(
            self.value
                .mlp
                .named_params("v")
                .into_iter()
                .map(|(n, m)| (format!("{VALUE_PREFIX}{n}"), m.clone())),
        );
        Checkpoint {
            tensors,
            config: train_config_text(&self.config),
            rng_state: rng::state_bytes(&self.rng),
        }
    }

    /// Rebuilds the models described by the config echo and fills in every
    /// parameter from the tensor table, which must match exactly.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = parse_train_config(&ck.config)?;
        let (mut policy, mut value) = config.init_models()?;
        let mut wanted: Vec<String> = policy
            .named_params()
            .into_iter()
            .map(|(n, _)| format!("{POLICY_PREFIX}{n}"))
            .collect();
        wanted.extend(
            value
                .mlp
                .named_params("v")
                .into_iter()
                .map(|(n, _)| format!("{VALUE_PREFIX}{n}")),
        );
        if let Some((extra, _)) = ck.tensors.iter().find(|(n, _)| !wanted.contains(n)) {
            return Err(CheckpointError::Tensor {
                name: extra.clone(),
                msg: "not part of the configured models".into(),
            });
        }
        let mut slots = policy.params_mut();
        slots.extend(value.mlp.params_mut());
        for (name, slot) in wanted.iter().zip(slots) {
            let (_, m) = ck
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::Tensor {
                    name: name.clone(),
                    msg: "missing".into(),
                })?;
            if m.shape() != slot.shape() {
                return Err(CheckpointError::Tensor {
                    name: name.clone(),
                    msg: format!("shape {:?}, expected {:?}", m.shape(), slot.shape()),
                });
            }
            *slot = m.clone();
        }
        Ok(Self {
            config,
            policy,
            value,
            rng: rng::from_state_bytes(ck.rng_state),
        })
    }
}

#[cfg(test)]
mod tests;
