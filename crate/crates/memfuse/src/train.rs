//! Deterministic mini-batch training with validation-based selection,
//! plus the modality/attention ablation harness.
//!
//! One training run is driven entirely by a single seeded generator:
//! epoch shuffles and dropout masks come from the same stream, so
//! identical `(seed, config, data)` reproduce the same checkpoint
//! bit for bit. Validation metrics are computed in eval mode.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{pad_batch, shuffle_samples, Modality, Sample};
use crate::layers::Mode;
use crate::model::{
    bind, forward_on_tape, loss_on_tape, predict, AttentionMode, ModelConfig, ModelError,
    ModelParams,
};
use crate::stats::{mse, spearman, StatsError};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("non-finite gradient encountered")]
    NonFiniteGradient,
    #[error("sample id {id} appears in both train and validation sets")]
    OverlappingIds { id: String },
    #[error("{which} dataset is empty")]
    EmptyDataset { which: &'static str },
    #[error("sample {id} has no label")]
    MissingLabel { id: String },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("ablation variant {variant}: {source}")]
    Variant {
        variant: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    ValMse,
    ValSpearman,
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    10
}
fn default_selection_metric() -> SelectionMetric {
    SelectionMetric::ValSpearman
}
fn default_grad_clip_norm() -> Option<f64> {
    Some(5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_selection_metric")]
    pub selection_metric: SelectionMetric,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_grad_clip_norm")]
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
            seed: 0,
            early_stop_patience: default_patience(),
            selection_metric: default_selection_metric(),
            grad_clip_norm: default_grad_clip_norm(),
        }
    }
}

impl TrainConfig {
    /// Budget tuned for the planted synthetic datasets: small model,
    /// few epochs, aggressive learning rate.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            epochs: 16,
            batch_size: 32,
            learning_rate: 3e-3,
            early_stop_patience: 5,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be ≥ 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    /// `None` when validation predictions are rank-degenerate.
    pub val_spearman: Option<f64>,
    pub grad_norm: f64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// Line-JSON rendering, one epoch record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// One bias-corrected Adam update over a flat parameter buffer.
///
/// `step` is 1-based. `weight_decay` is classic L2 (added to the
/// gradient before the moment updates).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    learning_rate: f64,
    hyper: &AdamHyper,
    weight_decay: f64,
) -> Result<(), TrainError> {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i] + weight_decay * param[i];
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
    Ok(())
}

/// Optimizer state across steps, aligned with `ModelParams::tensors`.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    weight_decay: f64,
    /// Adam: (first, second) moments. SGD: (velocity, unused).
    slots: Vec<(Vec<f64>, Vec<f64>)>,
    step: usize,
}

impl Optimizer {
    pub fn new(tc: &TrainConfig, params: &ModelParams) -> Self {
        let slots = params
            .tensors()
            .iter()
            .map(|t| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        Self {
            kind: tc.optimizer,
            learning_rate: tc.learning_rate,
            weight_decay: tc.weight_decay,
            slots,
            step: 0,
        }
    }

    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &[Vec<f64>],
    ) -> Result<(), TrainError> {
        self.step += 1;
        let tensors = params.tensors_mut();
        debug_assert_eq!(tensors.len(), grads.len());
        for ((tensor, grad), (m, v)) in tensors.into_iter().zip(grads).zip(&mut self.slots) {
            match self.kind {
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    adam_step(
                        tensor.data_mut(),
                        grad,
                        m,
                        v,
                        self.step,
                        self.learning_rate,
                        &AdamHyper {
                            beta1,
                            beta2,
                            epsilon,
                        },
                        self.weight_decay,
                    )?;
                }
                OptimizerKind::Sgd { momentum } => {
                    let data = tensor.data_mut();
                    for i in 0..data.len() {
                        let g = grad[i] + self.weight_decay * data[i];
                        if !g.is_finite() {
                            return Err(TrainError::NonFiniteGradient);
                        }
                        m[i] = momentum * m[i] + g;
                        data[i] -= self.learning_rate * m[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if let Some(clip) = clip {
        if norm > clip && norm > 0.0 {
            let scale = clip / norm;
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

/// Validation summary over a labeled dataset.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub mse: f64,
    /// `None` when predictions or labels are rank-degenerate.
    pub spearman: Option<f64>,
    pub n: usize,
}

/// Eval-mode predictions over `samples`, in input order.
pub fn predict_all(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
) -> Result<Vec<f64>, TrainError> {
    samples
        .iter()
        .map(|s| predict(params, config, s).map_err(TrainError::from))
        .collect()
}

/// MSE and Spearman ρ of eval-mode predictions against labels.
pub fn evaluate_model(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
) -> Result<EvalSummary, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset {
            which: "evaluation",
        });
    }
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        labels.push(s.label.ok_or_else(|| TrainError::MissingLabel {
            id: s.id.clone(),
        })?);
    }
    let preds = predict_all(params, config, samples)?;
    Ok(EvalSummary {
        mse: mse(&preds, &labels)?,
        spearman: spearman(&preds, &labels).ok(),
        n: samples.len(),
    })
}

struct BestTracker {
    metric: SelectionMetric,
    best_value: Option<f64>,
    best_params: ModelParams,
    best_epoch: Option<usize>,
}

impl BestTracker {
    fn improved(&self, candidate: Option<f64>) -> bool {
        let Some(candidate) = candidate else {
            return false;
        };
        match self.best_value {
            None => true,
            Some(best) => match self.metric {
                SelectionMetric::ValMse => candidate < best,
                SelectionMetric::ValSpearman => candidate > best,
            },
        }
    }
}

/// Trains `params`, returning the best checkpoint by the selection
/// metric and the per-epoch log.
///
/// Train and validation sets must be non-empty, fully labeled, and
/// id-disjoint. Dropout runs in train mode during optimization and eval
/// mode during validation.
pub fn train(
    config: &ModelConfig,
    params: ModelParams,
    train_samples: &[Sample],
    val_samples: &[Sample],
    tc: &TrainConfig,
) -> Result<(ModelParams, TrainLog), TrainError> {
    config.validate()?;
    tc.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::EmptyDataset { which: "train" });
    }
    if val_samples.is_empty() {
        return Err(TrainError::EmptyDataset { which: "validation" });
    }
    let train_ids: BTreeSet<&str> = train_samples.iter().map(|s| s.id.as_str()).collect();
    for s in val_samples {
        if train_ids.contains(s.id.as_str()) {
            return Err(TrainError::OverlappingIds { id: s.id.clone() });
        }
    }
    for s in train_samples.iter().chain(val_samples) {
        if s.label.is_none() {
            return Err(TrainError::MissingLabel { id: s.id.clone() });
        }
    }

    let mut params = params;
    let mut optimizer = Optimizer::new(tc, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log = TrainLog::default();
    let mut tracker = BestTracker {
        metric: tc.selection_metric,
        best_value: None,
        best_params: params.clone(),
        best_epoch: None,
    };
    let mut epochs_since_improvement = 0usize;

    let mut order: Vec<Sample> = train_samples.to_vec();
    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        shuffle_samples(&mut order, rng_u64(&mut rng));
        let mut epoch_loss = 0.0;
        let mut epoch_grad_norm: f64 = 0.0;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            let refs: Vec<&Sample> = batch.iter().collect();
            let padded = pad_batch(&refs);
            let mut tape = Tape::new();
            let bound = bind(&params, config, &mut tape);
            let mut batch_losses = Vec::with_capacity(batch.len());
            for (i, sample) in batch.iter().enumerate() {
                let pred = forward_on_tape(
                    &mut tape,
                    &bound,
                    config,
                    &sample.id,
                    &padded.sequences[i],
                    Mode::Train,
                    &mut rng,
                )
                .map_err(|e| match e {
                    // Non-finite activations are a divergence, not a
                    // modeling error.
                    ModelError::Tensor(crate::tensor::TensorError::NonFinite { .. }) => {
                        TrainError::Diverged {
                            epoch,
                            batch: batch_idx,
                        }
                    }
                    other => other.into(),
                })?;
                let label = sample.label.expect("labels validated above");
                batch_losses.push(loss_on_tape(&mut tape, pred, label)?);
            }
            let mut total = batch_losses[0];
            for &l in &batch_losses[1..] {
                total = tape.add(total, l)?;
            }
            let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
            let batch_loss = tape.value(mean).data()[0];
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            tape.backward(mean)?;
            let mut grads: Vec<Vec<f64>> = bound
                .param_nodes()
                .iter()
                .map(|&id| tape.grad(id).expect("backward ran").expect("param").to_vec())
                .collect();
            let norm = clip_global_norm(&mut grads, tc.grad_clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_grad_norm = epoch_grad_norm.max(norm);
            optimizer.apply(&mut params, &grads).map_err(|e| match e {
                TrainError::NonFiniteGradient => TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            })?;
        }
        let train_loss = epoch_loss / order.len() as f64;
        let summary = evaluate_model(&params, config, val_samples)?;
        let candidate = match tc.selection_metric {
            SelectionMetric::ValMse => Some(summary.mse),
            SelectionMetric::ValSpearman => summary.spearman,
        };
        if tracker.improved(candidate) {
            tracker.best_value = candidate;
            tracker.best_params = params.clone();
            tracker.best_epoch = Some(epoch);
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mse: summary.mse,
            val_spearman: summary.spearman,
            grad_norm: epoch_grad_norm,
            wall_time_ms: start.elapsed().as_millis() as u64,
        });
        if epochs_since_improvement > tc.early_stop_patience {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = tracker.best_epoch;
    Ok((tracker.best_params, log))
}

fn rng_u64(rng: &mut ChaCha8Rng) -> u64 {
    rand::Rng::random(rng)
}

// ── Ablation harness ────────────────────────────────────────────────

/// One trained variant's validation outcome.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub spearman_rho: Option<f64>,
    pub mse: f64,
    pub epochs_run: usize,
    pub seed: u64,
}

/// The seven modality subsets, in reporting order.
pub fn modality_variants() -> Vec<(String, Vec<Modality>)> {
    vec![
        ("video_only".into(), vec![Modality::Video]),
        ("text_only".into(), vec![Modality::Text]),
        ("audio_only".into(), vec![Modality::Audio]),
        (
            "text_audio".into(),
            vec![Modality::Text, Modality::Audio],
        ),
        (
            "text_video".into(),
            vec![Modality::Text, Modality::Video],
        ),
        (
            "audio_video".into(),
            vec![Modality::Audio, Modality::Video],
        ),
        (
            "trimodal".into(),
            vec![Modality::Video, Modality::Audio, Modality::Text],
        ),
    ]
}

/// Derives the variant configuration for a modality subset: the full
/// architecture when at least two modalities remain, self-attention only
/// for single-modality models (cross-attention needs a counterpart).
pub fn subset_config(base: &ModelConfig, subset: &[Modality]) -> ModelConfig {
    let mut config = base.clone();
    config.modalities = subset.iter().copied().collect();
    config.input_dims = base
        .input_dims
        .iter()
        .filter(|(m, _)| config.modalities.contains(m))
        .map(|(&m, &d)| (m, d))
        .collect();
    if config.modalities.len() < 2 && config.attention_mode.uses_cross_attention() {
        config.attention_mode = AttentionMode::SelfOnly;
    }
    config
}

/// Trains the 7 modality subsets and the 5 attention modes under a
/// shared seed and budget, on up to `threads` parallel workers. Rows
/// come back in enumeration order regardless of scheduling.
pub fn ablation_suite(
    base: &ModelConfig,
    train_samples: &[Sample],
    val_samples: &[Sample],
    tc: &TrainConfig,
    threads: usize,
) -> Result<Vec<AblationRow>, TrainError> {
    for m in Modality::ALL {
        if !base.modalities.contains(&m) {
            return Err(TrainError::InvalidConfig(format!(
                "ablation needs all three modalities in the base config, missing {m}"
            )));
        }
    }
    let mut jobs: Vec<(String, ModelConfig)> = Vec::new();
    for (name, subset) in modality_variants() {
        jobs.push((name, subset_config(base, &subset)));
    }
    for mode in AttentionMode::ALL {
        let mut config = base.clone();
        config.attention_mode = mode;
        jobs.push((mode.name().to_string(), config));
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow, TrainError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= jobs.len() {
                    break;
                }
                let (name, config) = &jobs[idx];
                let outcome = run_variant(name, config, train_samples, val_samples, tc);
                results.lock().expect("no poisoned workers")[idx] = Some(outcome);
            });
        }
    });

    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|slot| slot.expect("every job ran"))
        .collect()
}

fn run_variant(
    name: &str,
    config: &ModelConfig,
    train_samples: &[Sample],
    val_samples: &[Sample],
    tc: &TrainConfig,
) -> Result<AblationRow, TrainError> {
    let wrap = |source: TrainError| TrainError::Variant {
        variant: name.to_string(),
        source: Box::new(source),
    };
    let params = crate::model::build(config, tc.seed).map_err(|e| wrap(e.into()))?;
    let (best, log) = train(config, params, train_samples, val_samples, tc).map_err(wrap)?;
    let summary = evaluate_model(&best, config, val_samples).map_err(wrap)?;
    Ok(AblationRow {
        variant: name.to_string(),
        spearman_rho: summary.spearman,
        mse: summary.mse,
        epochs_run: log.epochs.len(),
        seed: tc.seed,
    })
}

/// Renders ablation rows as CSV with the fixed column order.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,spearman_rho,mse,epochs_run,seed\n");
    for row in rows {
        let rho = row
            .spearman_rho
            .map(|v| format!("{v}"))
            .unwrap_or_else(|| "NA".to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.variant, rho, row.mse, row.epochs_run, row.seed
        ));
    }
    out
}
