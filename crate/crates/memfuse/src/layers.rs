//! Neural building blocks: linear maps, layer normalization, dropout,
//! multi-head attention (self and cross), and sequence pooling.
//!
//! Layers own their parameters as plain [`Tensor`]s. To run a forward
//! pass they must first be bound to a [`Tape`] (one leaf per parameter
//! per tape), which yields a `Bound*` handle holding node ids. Binding
//! the same layer twice on one tape would split gradient accumulation
//! across duplicate leaves, so all forwards go through the bound form.

use rand::Rng;

use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Affine map `y = x·Wᵀ + b` over the last axis. Weight is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Weights drawn from `U(−1/√in, 1/√in)`, biases zero.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::from_vec(vec![out_dim, in_dim], data).expect("extent checked"),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl LinearLayer {
    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

/// `x [m, in] → x·Wᵀ + b [m, out]`.
pub fn linear_forward(
    tape: &mut Tape,
    layer: &BoundLinear,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let wt = tape.transpose(layer.weight)?;
    let xw = tape.matmul(x, wt)?;
    let rows = tape.value(xw).rows();
    let b = tape.repeat_rows(layer.bias, rows)?;
    tape.add(xw, b)
}

/// Per-row normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub epsilon: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        Self {
            gain: Tensor::from_vec(vec![dim], vec![1.0; dim]).expect("extent checked"),
            shift: Tensor::zeros(vec![dim]),
            epsilon: LAYER_NORM_EPS,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayerNorm {
        BoundLayerNorm {
            gain: tape.param(self.gain.clone()),
            shift: tape.param(self.shift.clone()),
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayerNorm {
    pub gain: NodeId,
    pub shift: NodeId,
    pub epsilon: f64,
}

pub fn layernorm_forward(
    tape: &mut Tape,
    ln: &BoundLayerNorm,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    tape.layer_norm(x, ln.gain, ln.shift, ln.epsilon)
}

/// Train/eval switch shared by dropout and the model forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Eval mode is the identity (no tape node at all).
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate { rate });
        }
        Ok(Self { rate })
    }
}

pub fn dropout_forward<R: Rng>(
    tape: &mut Tape,
    dropout: &Dropout,
    x: NodeId,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId, TensorError> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train => {
            if dropout.rate == 0.0 {
                // Still consume the rng so train-mode streams are
                // independent of whether a mask was materialized.
                return tape.dropout(x, 0.0, rng);
            }
            tape.dropout(x, dropout.rate, rng)
        }
    }
}

/// Scaled dot-product attention with `num_heads` parallel heads.
///
/// Query/key/value/output projections are full `d → d` linear layers;
/// each head works on its own `head_dim`-wide column slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub head_dim: usize,
    pub w_q: LinearLayer,
    pub w_k: LinearLayer,
    pub w_v: LinearLayer,
    pub w_o: LinearLayer,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(model_dim: usize, num_heads: usize, rng: &mut R) -> Self {
        assert!(
            num_heads > 0 && model_dim % num_heads == 0,
            "model_dim {model_dim} must divide into {num_heads} heads"
        );
        Self {
            num_heads,
            head_dim: model_dim / num_heads,
            w_q: LinearLayer::init(model_dim, model_dim, rng),
            w_k: LinearLayer::init(model_dim, model_dim, rng),
            w_v: LinearLayer::init(model_dim, model_dim, rng),
            w_o: LinearLayer::init(model_dim, model_dim, rng),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMha {
        BoundMha {
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            w_q: self.w_q.bind(tape),
            w_k: self.w_k.bind(tape),
            w_v: self.w_v.bind(tape),
            w_o: self.w_o.bind(tape),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMha {
    pub num_heads: usize,
    pub head_dim: usize,
    pub w_q: BoundLinear,
    pub w_k: BoundLinear,
    pub w_v: BoundLinear,
    pub w_o: BoundLinear,
}

/// Attention output plus the per-head weight matrices, for inspection.
#[derive(Debug)]
pub struct MhaOutput {
    pub output: NodeId,
    pub attention: Vec<NodeId>,
}

/// Multi-head attention of `query_seq [Lq, d]` over `context_seq [Lk, d]`.
///
/// `mask` is row-major `[Lq × Lk]`; entry `(q, k)` marks key `k` visible
/// to query `q`. Every row needs at least one visible key. Self-attention
/// is the special case `context_seq == query_seq`.
pub fn mha_forward(
    tape: &mut Tape,
    mha: &BoundMha,
    query_seq: NodeId,
    context_seq: NodeId,
    mask: &[bool],
) -> Result<MhaOutput, TensorError> {
    let d = mha.num_heads * mha.head_dim;
    for (name, node) in [("query", query_seq), ("context", context_seq)] {
        let shape = tape.value(node).shape().to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(TensorError::RankMismatch {
                op: if name == "query" {
                    "mha_forward query"
                } else {
                    "mha_forward context"
                },
                expected: "matrix with model_dim columns",
                shape,
            });
        }
    }
    let lq = tape.value(query_seq).rows();
    let lk = tape.value(context_seq).rows();
    if mask.len() != lq * lk {
        return Err(TensorError::MaskLength {
            op: "mha_forward",
            mask_len: mask.len(),
            expected: lq * lk,
        });
    }

    let q = linear_forward(tape, &mha.w_q, query_seq)?;
    let k = linear_forward(tape, &mha.w_k, context_seq)?;
    let v = linear_forward(tape, &mha.w_v, context_seq)?;

    let scale = 1.0 / (mha.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(mha.num_heads);
    let mut attention = Vec::with_capacity(mha.num_heads);
    for h in 0..mha.num_heads {
        let start = h * mha.head_dim;
        let qh = tape.slice_cols(q, start, mha.head_dim)?;
        let kh = tape.slice_cols(k, start, mha.head_dim)?;
        let vh = tape.slice_cols(v, start, mha.head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scaled, mask)?;
        attention.push(probs);
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    let output = linear_forward(tape, &mha.w_o, merged)?;
    Ok(MhaOutput { output, attention })
}

/// Sequence aggregation strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    SelfAttention,
    Average,
    Max,
}

/// Pools `seq [L, d]` down to a vector `[d]` over the valid rows.
///
/// Self-attention pooling runs full self-attention and then a masked
/// mean over the valid positions; `average` is the masked mean of the
/// raw rows; `max` the masked per-dimension max. Padded rows never
/// contribute: they are hidden from the attention keys and excluded
/// from the mean/max.
pub fn pool(
    tape: &mut Tape,
    seq: NodeId,
    mask: &[bool],
    mode: PoolMode,
    self_attn: Option<&BoundMha>,
) -> Result<NodeId, TensorError> {
    let rows = tape.value(seq).rows();
    if mask.len() != rows {
        return Err(TensorError::MaskLength {
            op: "pool",
            mask_len: mask.len(),
            expected: rows,
        });
    }
    match mode {
        PoolMode::Average => tape.masked_mean_rows(seq, mask),
        PoolMode::Max => tape.masked_max_rows(seq, mask),
        PoolMode::SelfAttention => {
            let mha = self_attn.expect("self-attention pooling requires an attention block");
            // Every query row (padded ones included) sees the valid keys,
            // so no row is fully masked; padded outputs are then dropped
            // by the masked mean.
            let attn_mask: Vec<bool> = (0..rows).flat_map(|_| mask.iter().copied()).collect();
            let attended = mha_forward(tape, mha, seq, seq, &attn_mask)?;
            tape.masked_mean_rows(attended.output, mask)
        }
    }
}
