//! Self-describing checkpoint format.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic      4 bytes  "MMEM"
//! version    u16      1
//! config_len u32      length of the canonical config JSON
//! config     bytes    serde_json of [`ModelConfig`] (sorted keys)
//! n_buffers  u32      parameter buffer count
//! buffers    n ×      { len u32, len × f64 little-endian }
//! crc        u32      CRC-32 of every preceding byte
//! ```
//!
//! Buffers appear in [`ModelParams::tensors`] order, so the embedded
//! config fully determines their shapes; loading rebuilds the parameter
//! structure and fails on any mismatch.

use thiserror::Error;

use super::{FusionHead, ModalityParams, ModelConfig, ModelError, ModelParams};
use crate::crc32::crc32;
use crate::layers::{LayerNorm, LinearLayer, MultiHeadAttention};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMEM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic (expected MMEM)")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (expected {VERSION})")]
    BadVersion { got: u16 },
    #[error("checkpoint truncated: needed {expected} bytes, had {got}")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("embedded config is invalid JSON: {0}")]
    ConfigJson(#[source] serde_json::Error),
    #[error("embedded config fails validation: {0}")]
    ConfigInvalid(String),
    #[error("parameter buffers do not match the embedded config: {detail}")]
    ShapeMismatch { detail: String },
    #[error("checkpoint contains non-finite parameter values")]
    NonFinite,
}

/// Serializes `(params, config)` to checkpoint bytes.
pub fn serialize(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>, ModelError> {
    config.validate()?;
    let config_json = serde_json::to_vec(config).expect("config serializes");
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.numel() as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses checkpoint bytes back into the config and parameters.
pub fn deserialize(bytes: &[u8]) -> Result<(ModelConfig, ModelParams), ModelError> {
    let mut reader = Reader { bytes, pos: 0 };
    let magic = reader.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u16::from_le_bytes(reader.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion { got: version }.into());
    }
    let config_len = u32::from_le_bytes(reader.take(4)?.try_into().unwrap()) as usize;
    let config_bytes = reader.take(config_len)?.to_vec();
    let n_buffers = u32::from_le_bytes(reader.take(4)?.try_into().unwrap()) as usize;
    let mut buffers = Vec::with_capacity(n_buffers);
    for _ in 0..n_buffers {
        let len = u32::from_le_bytes(reader.take(4)?.try_into().unwrap()) as usize;
        let raw = reader.take(len * 8)?;
        let mut buf = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(8) {
            buf.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        buffers.push(buf);
    }
    let stored = u32::from_le_bytes(reader.take(4)?.try_into().unwrap());
    if reader.pos != bytes.len() {
        return Err(CheckpointError::Truncated {
            expected: reader.pos,
            got: bytes.len(),
        }
        .into());
    }
    let computed = crc32(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let config: ModelConfig =
        serde_json::from_slice(&config_bytes).map_err(CheckpointError::ConfigJson)?;
    config
        .validate()
        .map_err(|e| CheckpointError::ConfigInvalid(e.to_string()))?;
    let params = params_from_buffers(&config, buffers)?;
    if params.tensors().iter().any(|t| !t.is_finite()) {
        return Err(CheckpointError::NonFinite.into());
    }
    Ok((config, params))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                expected: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

/// Rebuilds the parameter structure from flat buffers in
/// [`ModelParams::tensors`] order, validating every shape against the
/// config.
fn params_from_buffers(
    config: &ModelConfig,
    buffers: Vec<Vec<f64>>,
) -> Result<ModelParams, CheckpointError> {
    let latent = config.latent_dim;
    let mut iter = buffers.into_iter();
    let mut take = |what: &str, shape: Vec<usize>| -> Result<Tensor, CheckpointError> {
        let buf = iter.next().ok_or_else(|| CheckpointError::ShapeMismatch {
            detail: format!("missing buffer for {what}"),
        })?;
        Tensor::from_vec(shape.clone(), buf).map_err(|_| CheckpointError::ShapeMismatch {
            detail: format!("{what} does not have shape {shape:?}"),
        })
    };

    let mut per_modality = Vec::new();
    for m in config.ordered_modalities() {
        let in_dim = config.input_dims[&m];
        let projection = LinearLayer {
            weight: take(&format!("{m} projection weight"), vec![latent, in_dim])?,
            bias: take(&format!("{m} projection bias"), vec![latent])?,
        };
        let norm = LayerNorm {
            gain: take(&format!("{m} norm gain"), vec![latent])?,
            shift: take(&format!("{m} norm shift"), vec![latent])?,
            epsilon: crate::layers::LAYER_NORM_EPS,
        };
        let mut take_attn = |what: &str| -> Result<MultiHeadAttention, CheckpointError> {
            let mut linear = |part: &str| -> Result<LinearLayer, CheckpointError> {
                Ok(LinearLayer {
                    weight: take(&format!("{what} {part} weight"), vec![latent, latent])?,
                    bias: take(&format!("{what} {part} bias"), vec![latent])?,
                })
            };
            Ok(MultiHeadAttention {
                num_heads: config.num_heads,
                head_dim: latent / config.num_heads,
                w_q: linear("query")?,
                w_k: linear("key")?,
                w_v: linear("value")?,
                w_o: linear("output")?,
            })
        };
        let self_attn = if config.attention_mode.uses_self_attention() {
            Some(take_attn(&format!("{m} self-attention"))?)
        } else {
            None
        };
        let cross_attn = if config.attention_mode.uses_cross_attention() {
            Some(take_attn(&format!("{m} cross-attention"))?)
        } else {
            None
        };
        per_modality.push((
            m,
            ModalityParams {
                projection,
                norm,
                self_attn,
                cross_attn,
            },
        ));
    }
    let fused = config.modalities.len() * latent;
    let fusion = if config.literal_fusion_head {
        FusionHead::Literal {
            output: LinearLayer {
                weight: take("fusion output weight", vec![1, fused])?,
                bias: take("fusion output bias", vec![1])?,
            },
        }
    } else {
        FusionHead::TwoLayer {
            hidden: LinearLayer {
                weight: take(
                    "fusion hidden weight",
                    vec![config.fusion_hidden_dim, fused],
                )?,
                bias: take("fusion hidden bias", vec![config.fusion_hidden_dim])?,
            },
            output: LinearLayer {
                weight: take("fusion output weight", vec![1, config.fusion_hidden_dim])?,
                bias: take("fusion output bias", vec![1])?,
            },
        }
    };
    if iter.next().is_some() {
        return Err(CheckpointError::ShapeMismatch {
            detail: "checkpoint carries more buffers than the config defines".to_string(),
        });
    }
    Ok(ModelParams {
        per_modality,
        fusion,
    })
}
