//! The configurable memorability predictor.
//!
//! Pipeline per sample: each configured modality's embedding sequence is
//! projected into the shared latent space (linear → layer norm →
//! dropout), pooled to a fixed-length vector according to the attention
//! mode, optionally cross-attended against the other modalities' pooled
//! vectors, concatenated, and passed through the fusion head to a
//! sigmoid-bounded score.
//!
//! Attention modes cover the architecture variants under study:
//!
//! | mode                 | pooling        | cross-attention |
//! |----------------------|----------------|-----------------|
//! | `self_and_cross`     | self-attention | yes             |
//! | `self_only`          | self-attention | no              |
//! | `cross_with_average` | average        | yes             |
//! | `average_only`       | average        | no              |
//! | `max_only`           | max            | no              |

mod checkpoint;

pub use checkpoint::{deserialize, serialize, CheckpointError, VERSION as CHECKPOINT_VERSION};

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Modality, PaddedSequence, Sample};
use crate::layers::{
    dropout_forward, layernorm_forward, linear_forward, mha_forward, pool, BoundLayerNorm,
    BoundLinear, BoundMha, Dropout, LayerNorm, LinearLayer, Mode, MultiHeadAttention, PoolMode,
};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {}", problems.join("; "))]
    InvalidConfig { problems: Vec<String> },
    #[error("sample {id}: missing {modality} embeddings")]
    MissingModality { id: String, modality: Modality },
    #[error("{modality} embeddings are {got}-dimensional, config expects {expected}")]
    DimensionMismatch {
        modality: Modality,
        expected: usize,
        got: usize,
    },
    #[error("label {label} outside [0, 1]")]
    LabelOutOfRange { label: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    SelfAndCross,
    SelfOnly,
    CrossWithAverage,
    AverageOnly,
    MaxOnly,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 5] = [
        AttentionMode::SelfAndCross,
        AttentionMode::SelfOnly,
        AttentionMode::CrossWithAverage,
        AttentionMode::AverageOnly,
        AttentionMode::MaxOnly,
    ];

    pub fn uses_self_attention(self) -> bool {
        matches!(self, AttentionMode::SelfAndCross | AttentionMode::SelfOnly)
    }

    pub fn uses_cross_attention(self) -> bool {
        matches!(
            self,
            AttentionMode::SelfAndCross | AttentionMode::CrossWithAverage
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::SelfAndCross => "self_and_cross",
            AttentionMode::SelfOnly => "self_only",
            AttentionMode::CrossWithAverage => "cross_with_average",
            AttentionMode::AverageOnly => "average_only",
            AttentionMode::MaxOnly => "max_only",
        }
    }
}

fn default_latent_dim() -> usize {
    1024
}
fn default_num_heads() -> usize {
    8
}
fn default_dropout_rate() -> f64 {
    0.1
}
fn default_fusion_hidden_dim() -> usize {
    512
}
fn default_attention_mode() -> AttentionMode {
    AttentionMode::SelfAndCross
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Non-empty subset of the three modalities.
    pub modalities: BTreeSet<Modality>,
    /// Embedding width per configured modality.
    pub input_dims: BTreeMap<Modality, usize>,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default = "default_attention_mode")]
    pub attention_mode: AttentionMode,
    #[serde(default = "default_fusion_hidden_dim")]
    pub fusion_hidden_dim: usize,
    /// Collapse the fusion head to a single linear map applied to
    /// relu(dropout(f)) instead of the two-layer reducing network.
    #[serde(default)]
    pub literal_fusion_head: bool,
}

impl ModelConfig {
    /// Small trimodal configuration sized for the synthetic datasets:
    /// latent 16, 2 heads, hidden 32, full self+cross attention.
    pub fn desk_scale(input_dims: BTreeMap<Modality, usize>) -> Self {
        Self {
            modalities: input_dims.keys().copied().collect(),
            input_dims,
            latent_dim: 16,
            num_heads: 2,
            dropout_rate: 0.1,
            attention_mode: AttentionMode::SelfAndCross,
            fusion_hidden_dim: 32,
            literal_fusion_head: false,
        }
    }

    /// Validates every invariant, collecting all violations at once.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if self.modalities.is_empty() {
            problems.push("at least one modality is required".to_string());
        }
        for m in &self.modalities {
            match self.input_dims.get(m) {
                Some(0) => problems.push(format!("input dim for {m} must be positive")),
                Some(_) => {}
                None => problems.push(format!("input_dims missing entry for {m}")),
            }
        }
        for m in self.input_dims.keys() {
            if !self.modalities.contains(m) {
                problems.push(format!("input_dims names unconfigured modality {m}"));
            }
        }
        if self.latent_dim == 0 {
            problems.push("latent_dim must be positive".to_string());
        }
        if self.num_heads == 0 {
            problems.push("num_heads must be positive".to_string());
        } else if self.latent_dim % self.num_heads != 0 {
            problems.push(format!(
                "latent_dim {} not divisible by num_heads {}",
                self.latent_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.fusion_hidden_dim == 0 && !self.literal_fusion_head {
            problems.push("fusion_hidden_dim must be positive".to_string());
        }
        if self.attention_mode.uses_cross_attention() && self.modalities.len() < 2 {
            problems.push(format!(
                "attention mode {} requires at least 2 modalities, got {}",
                self.attention_mode.name(),
                self.modalities.len()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig { problems })
        }
    }

    /// Modalities in canonical (video, audio, text) order.
    pub fn ordered_modalities(&self) -> Vec<Modality> {
        self.modalities.iter().copied().collect()
    }

    /// Closed-form trainable-parameter count:
    ///
    /// ```text
    /// per modality:  latent·(in + 1)          projection
    ///              + 2·latent                 layer norm
    ///              + [4·(latent² + latent)]   self-attention block
    ///              + [4·(latent² + latent)]   cross-attention block
    /// fusion (two-layer): hidden·(k·latent + 1) + (hidden + 1)
    /// fusion (literal):   k·latent + 1
    /// ```
    ///
    /// where `k` is the modality count and the bracketed blocks exist
    /// only in modes that use them.
    pub fn parameter_census(&self) -> usize {
        let latent = self.latent_dim;
        let attn_block = 4 * (latent * latent + latent);
        let mut total = 0;
        for m in &self.modalities {
            total += latent * (self.input_dims[m] + 1); // projection
            total += 2 * latent; // layer norm
            if self.attention_mode.uses_self_attention() {
                total += attn_block;
            }
            if self.attention_mode.uses_cross_attention() {
                total += attn_block;
            }
        }
        let fused = self.modalities.len() * latent;
        if self.literal_fusion_head {
            total += fused + 1;
        } else {
            total += self.fusion_hidden_dim * (fused + 1) + (self.fusion_hidden_dim + 1);
        }
        total
    }
}

/// Per-modality trainable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    pub projection: LinearLayer,
    pub norm: LayerNorm,
    pub self_attn: Option<MultiHeadAttention>,
    pub cross_attn: Option<MultiHeadAttention>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionHead {
    /// Linear → ReLU → Dropout → Linear → Sigmoid.
    TwoLayer {
        hidden: LinearLayer,
        output: LinearLayer,
    },
    /// Sigmoid(Linear(ReLU(Dropout(f)))).
    Literal { output: LinearLayer },
}

/// The learned weight collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub per_modality: Vec<(Modality, ModalityParams)>,
    pub fusion: FusionHead,
}

impl ModelParams {
    /// Every tensor in the documented serialization order: modalities in
    /// canonical order with projection weight/bias, norm gain/shift, then
    /// self- and cross-attention q/k/v/o weight/bias pairs; finally the
    /// fusion layers.
    pub fn tensors(&self) -> Vec<&Tensor> {
        fn push_linear<'a>(l: &'a LinearLayer, out: &mut Vec<&'a Tensor>) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        let mut out = Vec::new();
        for (_, block) in &self.per_modality {
            push_linear(&block.projection, &mut out);
            out.push(&block.norm.gain);
            out.push(&block.norm.shift);
            for attn in [&block.self_attn, &block.cross_attn].into_iter().flatten() {
                push_linear(&attn.w_q, &mut out);
                push_linear(&attn.w_k, &mut out);
                push_linear(&attn.w_v, &mut out);
                push_linear(&attn.w_o, &mut out);
            }
        }
        match &self.fusion {
            FusionHead::TwoLayer { hidden, output } => {
                push_linear(hidden, &mut out);
                push_linear(output, &mut out);
            }
            FusionHead::Literal { output } => push_linear(output, &mut out),
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (_, block) in &mut self.per_modality {
            out.push(&mut block.projection.weight);
            out.push(&mut block.projection.bias);
            out.push(&mut block.norm.gain);
            out.push(&mut block.norm.shift);
            for attn in [&mut block.self_attn, &mut block.cross_attn]
                .into_iter()
                .flatten()
            {
                out.push(&mut attn.w_q.weight);
                out.push(&mut attn.w_q.bias);
                out.push(&mut attn.w_k.weight);
                out.push(&mut attn.w_k.bias);
                out.push(&mut attn.w_v.weight);
                out.push(&mut attn.w_v.bias);
                out.push(&mut attn.w_o.weight);
                out.push(&mut attn.w_o.bias);
            }
        }
        match &mut self.fusion {
            FusionHead::TwoLayer { hidden, output } => {
                out.push(&mut hidden.weight);
                out.push(&mut hidden.bias);
                out.push(&mut output.weight);
                out.push(&mut output.bias);
            }
            FusionHead::Literal { output } => {
                out.push(&mut output.weight);
                out.push(&mut output.bias);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Deterministic initialization: identical `(config, seed)` pairs yield
/// bitwise-identical parameters.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = config.latent_dim;
    let mut per_modality = Vec::new();
    for m in config.ordered_modalities() {
        let projection = LinearLayer::init(config.input_dims[&m], latent, &mut rng);
        let norm = LayerNorm::init(latent);
        let self_attn = config
            .attention_mode
            .uses_self_attention()
            .then(|| MultiHeadAttention::init(latent, config.num_heads, &mut rng));
        let cross_attn = config
            .attention_mode
            .uses_cross_attention()
            .then(|| MultiHeadAttention::init(latent, config.num_heads, &mut rng));
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
            output: LinearLayer::init(fused, 1, &mut rng),
        }
    } else {
        FusionHead::TwoLayer {
            hidden: LinearLayer::init(fused, config.fusion_hidden_dim, &mut rng),
            output: LinearLayer::init(config.fusion_hidden_dim, 1, &mut rng),
        }
    };
    Ok(ModelParams {
        per_modality,
        fusion,
    })
}

// ── Tape binding and forward ────────────────────────────────────────

struct BoundModalityBlock {
    modality: Modality,
    projection: BoundLinear,
    norm: BoundLayerNorm,
    self_attn: Option<BoundMha>,
    cross_attn: Option<BoundMha>,
}

enum BoundFusionHead {
    TwoLayer {
        hidden: BoundLinear,
        output: BoundLinear,
    },
    Literal {
        output: BoundLinear,
    },
}

/// Parameters registered on one tape (one leaf per tensor).
pub struct BoundModel {
    blocks: Vec<BoundModalityBlock>,
    fusion: BoundFusionHead,
    dropout: Dropout,
    param_nodes: Vec<NodeId>,
}

impl BoundModel {
    /// Parameter node ids, aligned with [`ModelParams::tensors`] order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.param_nodes
    }
}

/// Registers every parameter on the tape. Call once per tape.
pub fn bind(params: &ModelParams, config: &ModelConfig, tape: &mut Tape) -> BoundModel {
    let mut param_nodes = Vec::new();
    let bind_linear = |l: &LinearLayer, tape: &mut Tape, nodes: &mut Vec<NodeId>| {
        let bound = l.bind(tape);
        nodes.push(bound.weight);
        nodes.push(bound.bias);
        bound
    };
    let mut blocks = Vec::new();
    for (m, block) in &params.per_modality {
        let projection = bind_linear(&block.projection, tape, &mut param_nodes);
        let norm = block.norm.bind(tape);
        param_nodes.push(norm.gain);
        param_nodes.push(norm.shift);
        let bind_mha = |a: &MultiHeadAttention, tape: &mut Tape, nodes: &mut Vec<NodeId>| {
            let w_q = bind_linear(&a.w_q, tape, nodes);
            let w_k = bind_linear(&a.w_k, tape, nodes);
            let w_v = bind_linear(&a.w_v, tape, nodes);
            let w_o = bind_linear(&a.w_o, tape, nodes);
            BoundMha {
                num_heads: a.num_heads,
                head_dim: a.head_dim,
                w_q,
                w_k,
                w_v,
                w_o,
            }
        };
        let self_attn = block
            .self_attn
            .as_ref()
            .map(|a| bind_mha(a, tape, &mut param_nodes));
        let cross_attn = block
            .cross_attn
            .as_ref()
            .map(|a| bind_mha(a, tape, &mut param_nodes));
        blocks.push(BoundModalityBlock {
            modality: *m,
            projection,
            norm,
            self_attn,
            cross_attn,
        });
    }
    let fusion = match &params.fusion {
        FusionHead::TwoLayer { hidden, output } => BoundFusionHead::TwoLayer {
            hidden: bind_linear(hidden, tape, &mut param_nodes),
            output: bind_linear(output, tape, &mut param_nodes),
        },
        FusionHead::Literal { output } => BoundFusionHead::Literal {
            output: bind_linear(output, tape, &mut param_nodes),
        },
    };
    BoundModel {
        blocks,
        fusion,
        dropout: Dropout {
            rate: config.dropout_rate,
        },
        param_nodes,
    }
}

/// Runs the forward pass on an existing tape, returning the `[1, 1]`
/// prediction node.
pub fn forward_on_tape<R: Rng>(
    tape: &mut Tape,
    bound: &BoundModel,
    config: &ModelConfig,
    sample_id: &str,
    inputs: &BTreeMap<Modality, PaddedSequence>,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId, ModelError> {
    let latent = config.latent_dim;
    let mut pooled = Vec::with_capacity(bound.blocks.len());
    for block in &bound.blocks {
        let m = block.modality;
        let input = inputs.get(&m).ok_or_else(|| ModelError::MissingModality {
            id: sample_id.to_string(),
            modality: m,
        })?;
        let expected = config.input_dims[&m];
        if input.rows.cols() != expected {
            return Err(ModelError::DimensionMismatch {
                modality: m,
                expected,
                got: input.rows.cols(),
            });
        }
        let x = tape.leaf(input.rows.clone());
        let h = linear_forward(tape, &block.projection, x)?;
        let h = layernorm_forward(tape, &block.norm, h)?;
        let h = dropout_forward(tape, &bound.dropout, h, mode, rng)?;
        let pool_mode = match config.attention_mode {
            AttentionMode::SelfAndCross | AttentionMode::SelfOnly => PoolMode::SelfAttention,
            AttentionMode::CrossWithAverage | AttentionMode::AverageOnly => PoolMode::Average,
            AttentionMode::MaxOnly => PoolMode::Max,
        };
        let p = pool(tape, h, &input.mask, pool_mode, block.self_attn.as_ref())?;
        pooled.push(tape.reshape(p, vec![1, latent])?);
    }

    let use_cross = config.attention_mode.uses_cross_attention() && pooled.len() >= 2;
    let fused_parts = if use_cross {
        let mut attended = Vec::with_capacity(pooled.len());
        for (i, block) in bound.blocks.iter().enumerate() {
            let others: Vec<NodeId> = pooled
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, &p)| p)
                .collect();
            let context = tape.concat(&others, 0)?;
            let mask = vec![true; others.len()];
            let cross = block
                .cross_attn
                .as_ref()
                .expect("cross mode blocks carry cross attention");
            let out = mha_forward(tape, cross, pooled[i], context, &mask)?;
            attended.push(out.output);
        }
        attended
    } else {
        pooled
    };

    let fused = tape.concat(&fused_parts, 1)?;
    let pred = match &bound.fusion {
        BoundFusionHead::TwoLayer { hidden, output } => {
            let h = linear_forward(tape, hidden, fused)?;
            let h = tape.relu(h)?;
            let h = dropout_forward(tape, &bound.dropout, h, mode, rng)?;
            let o = linear_forward(tape, output, h)?;
            tape.sigmoid(o)?
        }
        BoundFusionHead::Literal { output } => {
            let h = dropout_forward(tape, &bound.dropout, fused, mode, rng)?;
            let h = tape.relu(h)?;
            let o = linear_forward(tape, output, h)?;
            tape.sigmoid(o)?
        }
    };
    Ok(pred)
}

/// Full-mask inputs straight from a sample's sequences.
pub fn sample_inputs(sample: &Sample) -> BTreeMap<Modality, PaddedSequence> {
    sample
        .sequences
        .iter()
        .map(|(&m, seq)| (m, PaddedSequence::from_sequence(seq)))
        .collect()
}

/// Single-sample forward pass on a fresh tape.
pub fn forward<R: Rng>(
    params: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    mode: Mode,
    rng: &mut R,
) -> Result<f64, ModelError> {
    let inputs = sample_inputs(sample);
    let mut tape = Tape::new();
    let bound = bind(params, config, &mut tape);
    let pred = forward_on_tape(&mut tape, &bound, config, &sample.id, &inputs, mode, rng)?;
    Ok(tape.value(pred).data()[0])
}

/// Deterministic eval-mode prediction.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
) -> Result<f64, ModelError> {
    // Eval mode never consumes randomness.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(params, config, sample, Mode::Eval, &mut rng)
}

/// Squared error for a single prediction/label pair. Both must lie in
/// [0, 1] (predictions always do; labels are validated).
pub fn loss(prediction: f64, label: f64) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&label) {
        return Err(ModelError::LabelOutOfRange { label });
    }
    let diff = prediction - label;
    Ok(diff * diff)
}

/// Tape-level squared-error node for training.
pub fn loss_on_tape(tape: &mut Tape, pred: NodeId, label: f64) -> Result<NodeId, ModelError> {
    if !(0.0..=1.0).contains(&label) {
        return Err(ModelError::LabelOutOfRange { label });
    }
    let target = tape.leaf(Tensor::from_vec(vec![1, 1], vec![label])?);
    let diff = tape.sub(pred, target)?;
    Ok(tape.mul(diff, diff)?)
}
