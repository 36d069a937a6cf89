//! Binary checkpoint: `LGLM`, u32 version, u32 header length, JSON header,
//! then every parameter as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_shapes, LmError, LogitClamp, ModelConfig, Result, TrainState, TransformerLm};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in floats.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub step: u64,
    pub peak_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub clamp: Option<LogitClamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerLm,
    pub header: CheckpointHeader,
}

fn bad(msg: impl Into<String>) -> LmError {
    LmError::Checkpoint(msg.into())
}

pub fn checkpoint_bytes(model: &TransformerLm, state: Option<&TrainState>) -> Vec<u8> {
    let mut offset = 0;
    let tensors = param_shapes(&model.cfg)
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry {
                name,
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>();
            e
        })
        .collect();
    let header = CheckpointHeader {
        config: model.cfg,
        tensors,
        step: state.map_or(0, |s| s.step),
        peak_lr: state.map(|s| s.peak_lr),
        warmup_steps: state.map(|s| s.warmup_steps),
        clamp: model.clamp.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(bad("truncated preamble"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    header.config.validate()?;
    let expected = param_shapes(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor list does not match config"));
    }
    let data = &body[hlen..];
    if data.len() % 4 != 0 {
        return Err(bad("data section is not a whole number of floats"));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = Vec::with_capacity(expected.len());
    let mut offset = 0;
    for ((name, shape), entry) in expected.into_iter().zip(&header.tensors) {
        if entry.name != name || entry.shape != shape || entry.offset != offset {
            return Err(bad(format!("tensor entry {} disagrees with config", entry.name)));
        }
        let n: usize = shape.iter().product();
        let slice = floats
            .get(offset..offset + n)
            .ok_or_else(|| bad(format!("truncated data in {name}")))?;
        params.push(Tensor::new(shape, slice.to_vec())?);
        offset += n;
    }
    if offset != floats.len() {
        return Err(bad(format!(
            "data holds {} floats, header describes {offset}",
            floats.len()
        )));
    }
    if let Some(c) = &header.clamp {
        if c.present.len() != header.config.vocab_size {
            return Err(bad("clamp length disagrees with vocabulary"));
        }
    }
    Ok(Checkpoint {
        model: TransformerLm {
            cfg: header.config,
            params,
            clamp: header.clamp.clone(),
        },
        header,
    })
}

pub fn save_checkpoint(model: &TransformerLm, state: Option<&TrainState>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, state)).map_err(|source| LmError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| LmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}
