//! Sparsity-penalized training and penalty-free fine-tuning.
//!
//! Both loops run SGD with momentum (`v ← μv + g`, `p ← p − lr·v`) over every
//! weight and gate of the model, which is updated in place.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::tensor::{Tensor, TensorError};
use crate::tracking::{gen_sequence, SequenceSpec, TrackError};
use crate::zoo::{GateVector, Mode, ModelError, ModelGraph, StatUpdate};

/// Gates with magnitude below this count as switched off.
pub const NEAR_ZERO: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] TrackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SparsityTrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    /// A learning rate of 0 is a dry run: losses are computed and recorded
    /// but nothing in the model changes, including BN running statistics.
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 5,
            steps_per_epoch: 32,
            batch_size: 4,
            seed: 0,
            mode: TrainMode::SparsityTrain,
        }
    }
}

impl TrainConfig {
    pub fn finetune() -> Self {
        TrainConfig {
            lambda: 0.0,
            mode: TrainMode::Finetune,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if self.mode == TrainMode::Finetune && self.lambda != 0.0 {
            return bad("lambda must be 0 when fine-tuning");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean task loss over the epoch's steps.
    pub task_loss: f64,
    /// `λ·Σ|γ|` at the end of the epoch.
    pub penalty: f64,
    /// Fraction of gate entries with `|γ| < 0.01` at the end of the epoch.
    pub sparsity_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,task_loss,penalty,sparsity_fraction";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch, r.task_loss, r.penalty, r.sparsity_fraction
            );
        }
        out
    }
}

pub fn gate_l1<'a>(gates: impl IntoIterator<Item = &'a GateVector>) -> f64 {
    gates
        .into_iter()
        .flat_map(|g| g.values.iter())
        .map(|v| v.abs())
        .sum()
}

/// Fraction of gate entries with magnitude below [`NEAR_ZERO`]; 0 when the
/// model has no gates.
pub fn sparsity_fraction<'a>(gates: impl IntoIterator<Item = &'a GateVector>) -> f64 {
    let (mut small, mut total) = (0usize, 0usize);
    for v in gates.into_iter().flat_map(|g| g.values.iter()) {
        total += 1;
        small += usize::from(v.abs() < NEAR_ZERO);
    }
    if total == 0 {
        0.0
    } else {
        small as f64 / total as f64
    }
}

/// `task + λ·Σ|γ|`.
pub fn total_loss<'a>(
    task_loss: f64,
    gates: impl IntoIterator<Item = &'a GateVector>,
    lambda: f64,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(TrainError::Config(
            "lambda must be finite and non-negative".into(),
        ));
    }
    if lambda == 0.0 {
        return Ok(task_loss);
    }
    Ok(task_loss + lambda * gate_l1(gates))
}

/// Per-element weights of the class-balanced loss over a `[N,1,H,W]` label
/// map: within each sample, every present class gets total weight
/// `1/classes_present`, split evenly over its pixels; samples are averaged.
pub fn balanced_weights(labels: &Tensor) -> Result<Vec<f64>> {
    let n = labels.shape().first().copied().unwrap_or(0);
    if labels.rank() != 4 || n == 0 || labels.numel() == 0 {
        return Err(TrainError::Config(format!(
            "label map must be a non-empty [N,1,H,W] tensor, got {:?}",
            labels.shape()
        )));
    }
    let per = labels.numel() / n;
    let mut weights = Vec::with_capacity(labels.numel());
    for sample in labels.data().chunks(per) {
        let pos = sample.iter().filter(|&&y| y == 1.0).count();
        let neg = sample.iter().filter(|&&y| y == -1.0).count();
        if pos + neg != per {
            return Err(TrainError::Config("labels must be +1 or -1".into()));
        }
        let classes = usize::from(pos > 0) + usize::from(neg > 0);
        for &y in sample {
            let count = if y == 1.0 { pos } else { neg };
            weights.push(1.0 / (classes * count * n) as f64);
        }
    }
    Ok(weights)
}

/// Class-balanced logistic loss of response logits against ±1 labels.
pub fn tracking_task_loss(response: &Tensor, labels: &Tensor) -> Result<f64> {
    if response.shape() != labels.shape() {
        return Err(TrainError::Config(format!(
            "response shape {:?} differs from label shape {:?}",
            response.shape(),
            labels.shape()
        )));
    }
    let weights = balanced_weights(labels)?;
    let mut tape = Tape::new();
    let r = tape.constant(response.clone());
    let loss = tape.weighted_logistic(r, labels.data().to_vec(), weights)?;
    Ok(tape.value(loss).item())
}

/// `±1` map with positives within `radius` cells of `center` (row, col).
pub fn label_map(size: usize, center: (f64, f64), radius: f64) -> Tensor {
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d = (y as f64 - center.0).hypot(x as f64 - center.1);
            data.push(if d <= radius { 1.0 } else { -1.0 });
        }
    }
    Tensor::new(vec![1, 1, size, size], data).expect("label buffer matches its shape")
}

/// Deterministic stream of template/search/label training triples.
///
/// Each pair comes from the first two frames of a fresh synthetic sequence
/// whose seed has the top bit set, so training data never coincides with
/// low-numbered benchmark sequences. The search crop is displaced by a
/// random whole number of response cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSource {
    pub sequence: SequenceSpec,
    pub max_shift: i64,
    pub label_radius: f64,
}

impl Default for PairSource {
    fn default() -> Self {
        PairSource {
            sequence: SequenceSpec::default(),
            max_shift: 2,
            label_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub templates: Tensor,
    pub searches: Tensor,
    pub labels: Tensor,
}

impl PairSource {
    pub fn batch(&self, model: &ModelGraph, seed: u64, size: usize) -> Result<Batch> {
        let r = model.response_size()?;
        let stride = model.response_stride()?;
        let mid = (r as f64 - 1.0) / 2.0;
        let spec = SequenceSpec {
            length: 2,
            ..self.sequence.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ts, mut ss, mut ls) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..size {
            let seq = gen_sequence(rng.random::<u64>() | 1 << 63, &spec)?;
            let (dy, dx) = (
                rng.random_range(-self.max_shift..=self.max_shift),
                rng.random_range(-self.max_shift..=self.max_shift),
            );
            let (tx, ty) = seq.gt_boxes[0].center();
            let (sx, sy) = seq.gt_boxes[1].center();
            ts.push(seq.frames[0].crop(tx, ty, model.template_size));
            ss.push(seq.frames[1].crop(
                sx - dx as f64 * stride,
                sy - dy as f64 * stride,
                model.search_size,
            ));
            ls.push(label_map(
                r,
                (mid + dy as f64, mid + dx as f64),
                self.label_radius,
            ));
        }
        let labels = Tensor::stack(&ls)?;
        let shape = [size, 1, r, r];
        Ok(Batch {
            templates: Tensor::stack(&ts)?,
            searches: Tensor::stack(&ss)?,
            labels: labels.reshape(&shape)?,
        })
    }
}

fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | step as u64);
    rng.random()
}

/// Stage-1 training on `task + λ·Σ|γ|`. Mutates `model` in place.
pub fn train(
    model: &mut ModelGraph,
    data: &PairSource,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    run(model, data, config)
}

/// Post-surgery recovery training; requires `mode = finetune` and `λ = 0`.
pub fn finetune(
    model: &mut ModelGraph,
    data: &PairSource,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if config.mode != TrainMode::Finetune {
        return Err(TrainError::Config(
            "fine-tuning requires mode = finetune".into(),
        ));
    }
    config.validate()?;
    run(model, data, config)
}

/// Value of `task + λ·Σ|γ|` on one batch, with the per-parameter gradient
/// in [`ModelGraph::visit_params`] order when `gradient` is set (zeros for
/// parameters the loss does not reach).
#[derive(Debug, Clone)]
pub struct Objective {
    pub task: f64,
    pub loss: f64,
    pub gradient: Vec<Vec<f64>>,
    pub updates: Vec<StatUpdate>,
}

/// Non-finite values surface as [`TrainError::Diverged`] with `epoch = 0`.
pub fn objective(
    model: &ModelGraph,
    batch: &Batch,
    lambda: f64,
    mode: Mode,
    gradient: bool,
) -> Result<Objective> {
    let diverged = |reason: String| TrainError::Diverged { epoch: 0, reason };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, gradient);
    let t = tape.constant(batch.templates.clone());
    let s = tape.constant(batch.searches.clone());
    let mut updates = Vec::new();
    let response = model
        .siamese_on_tape(&mut tape, &bound, t, s, mode, &mut updates)
        .map_err(|e| match e {
            ModelError::Tensor(TensorError::NonFinite { .. }) => diverged(e.to_string()),
            e => TrainError::Model(e),
        })?;
    let weights = balanced_weights(&batch.labels)?;
    let task = tape
        .weighted_logistic(response, batch.labels.data().to_vec(), weights)
        .map_err(|e| diverged(e.to_string()))?;
    let mut loss = task;
    if lambda != 0.0 {
        for &g in bound.gates.values() {
            let l1 = tape.l1_norm(g)?;
            let term = tape.scalar_mul(l1, lambda)?;
            loss = tape.add(loss, term)?;
        }
    }
    let (task, loss_value) = (tape.value(task).item(), tape.value(loss).item());
    if !loss_value.is_finite() {
        return Err(diverged("non-finite loss".into()));
    }
    let mut out = Vec::new();
    if gradient {
        let grads = tape.backward(loss)?;
        for &v in &bound.flat {
            out.push(match grads.data(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            });
        }
    }
    Ok(Objective {
        task,
        loss: loss_value,
        gradient: out,
        updates,
    })
}

fn run(model: &mut ModelGraph, data: &PairSource, config: &TrainConfig) -> Result<TrainHistory> {
    let mut velocity: Vec<Vec<f64>> = Vec::new();
    model.visit_params(|_, _, d| velocity.push(vec![0.0; d.len()]));
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let mut task_sum = 0.0;
        for step in 0..config.steps_per_epoch {
            let batch = data.batch(
                model,
                step_seed(config.seed, epoch, step),
                config.batch_size,
            )?;
            let obj = objective(
                model,
                &batch,
                config.lambda,
                Mode::Train,
                config.learning_rate != 0.0,
            )
            .map_err(|e| match e {
                TrainError::Diverged { reason, .. } => TrainError::Diverged { epoch, reason },
                e => e,
            })?;
            task_sum += obj.task;
            if config.learning_rate == 0.0 {
                continue;
            }
            let mut i = 0;
            model.visit_params_mut(|_, data| {
                for ((p, v), g) in data
                    .iter_mut()
                    .zip(velocity[i].iter_mut())
                    .zip(&obj.gradient[i])
                {
                    *v = config.momentum * *v + g;
                    *p -= config.learning_rate * *v;
                }
                i += 1;
            });
            model.apply_stat_updates(&obj.updates);
        }
        let mut finite = true;
        model.visit_params(|_, _, d| finite &= d.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(TrainError::Diverged {
                epoch,
                reason: "non-finite parameters".into(),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            task_loss: task_sum / config.steps_per_epoch as f64,
            penalty: config.lambda * gate_l1(model.gates.values()),
            sparsity_fraction: sparsity_fraction(model.gates.values()),
        });
    }
    Ok(history)
}
