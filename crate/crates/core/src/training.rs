//! Optimisation, early stopping, evaluation and the two-stage curriculum.
//!
//! Stage 1 trains every [`SubNetwork`] alone on its own modality. The heads
//! are then dropped, the encoders are wrapped in a [`ManModel`] with a fresh
//! attention block and fused head, and stage 2 trains everything end to end.
//! Scratch runs skip stage 1 and otherwise share the same code path.

use crate::data::MultimodalExample;
use crate::fusion::{argmax, BatchOutput, FusionError, ManModel, ManVars, VariantPlan};
use crate::layers::{
    bilstm_encode_batch, linear, LayerError, Parameterized, SubNetwork, SubNetworkVars, Task,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("diverged during {stage} at epoch {epoch}: non-finite {what}")]
    Divergence {
        stage: String,
        epoch: usize,
        what: &'static str,
    },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("example '{id}': label {label} is not a class index below {classes}")]
    InvalidLabel {
        id: String,
        label: f64,
        classes: usize,
    },
    #[error(transparent)]
    Model(#[from] FusionError),
}

impl From<LayerError> for TrainError {
    fn from(e: LayerError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Optimiser and schedule settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: 5.0,
            task: Task::Classification { classes: 2 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(TrainError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a positive finite number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm", "must be positive");
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return bad("task.classes", "need at least 2 classes");
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Records and metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Accuracy for classification, MAE for regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: MetricName,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    Mae,
}

impl MetricName {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification { .. } => MetricName::Accuracy,
            Task::Regression => MetricName::Mae,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Accuracy => "accuracy",
            MetricName::Mae => "mae",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == MetricName::Accuracy
    }

    /// Strictly better.
    pub fn improves(self, candidate: f64, incumbent: f64) -> bool {
        if self.higher_is_better() {
            candidate > incumbent
        } else {
            candidate < incumbent
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub metric: Metric,
    /// Mean attention weight per modality over the split, fusion order.
    pub attention_means: Option<Vec<f64>>,
    /// Wall-clock seconds of the training pass (train rows) or of the
    /// evaluation pass (val rows).
    pub seconds: f64,
}

/// Fraction of exact matches.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predicted.len(), labels.len());
    assert!(!labels.is_empty(), "accuracy of an empty set");
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean absolute error.
pub fn mae(predicted: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predicted.len(), targets.len());
    assert!(!targets.is_empty(), "MAE of an empty set");
    predicted
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / targets.len() as f64
}

/// Two-class accuracy of scores, class = `score >= 0`.
pub fn binary_accuracy(predicted: &[f64], targets: &[f64]) -> f64 {
    let cls = |v: &f64| usize::from(*v >= 0.0);
    let p: Vec<usize> = predicted.iter().map(cls).collect();
    let t: Vec<usize> = targets.iter().map(cls).collect();
    accuracy(&p, &t)
}

/// Column means of per-example weight rows.
pub fn mean_weights(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; m];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

// ---------------------------------------------------------------------------
// Optimiser

/// Adam moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<M: Parameterized<f64> + ?Sized>(model: &M) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |_, t| m.push(vec![0.0; t.numel()]));
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update after global-norm clipping. Returns the pre-clip norm.
pub fn optimizer_step<M: Parameterized<f64> + ?Sized>(
    model: &mut M,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    assert_eq!(
        grads.len(),
        state.m.len(),
        "one gradient per parameter tensor"
    );
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let scale = if norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut k = 0;
    model.visit_params_mut(&mut |_, p| {
        let (g, m, v) = (&grads[k], &mut state.m[k], &mut state.v[k]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        k += 1;
    });
    Ok(norm)
}

/// Patience-based early stopping on a validation metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub metric: MetricName,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, metric: MetricName) -> Self {
        Self {
            patience,
            metric,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch's metric; true when it is a new best.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => self.metric.improves(value, b),
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

// ---------------------------------------------------------------------------
// Trainable models

/// A model the training loop can drive: binds its parameters once per batch
/// (in [`Parameterized`] order) and maps a batch of examples to outputs.
pub trait Trainable: Parameterized<f64> + Clone {
    type Vars;

    fn bind(&self, g: &mut Graph<f64>) -> Self::Vars;

    /// Modalities read from each example, in order.
    fn modality_order(&self) -> Vec<String>;

    fn has_attention(&self) -> bool;

    fn forward_batch(
        &self,
        g: &mut Graph<f64>,
        vars: &Self::Vars,
        examples: &[&MultimodalExample],
    ) -> Result<BatchOutput, FusionError>;
}

impl Trainable for ManModel<f64> {
    type Vars = ManVars;

    fn bind(&self, g: &mut Graph<f64>) -> ManVars {
        ManModel::bind(self, g)
    }

    fn modality_order(&self) -> Vec<String> {
        ManModel::modality_order(self)
    }

    fn has_attention(&self) -> bool {
        self.attention().is_some()
    }

    fn forward_batch(
        &self,
        g: &mut Graph<f64>,
        vars: &ManVars,
        examples: &[&MultimodalExample],
    ) -> Result<BatchOutput, FusionError> {
        ManModel::forward_batch(self, g, vars, examples)
    }
}

impl Trainable for SubNetwork<f64> {
    type Vars = SubNetworkVars;

    fn bind(&self, g: &mut Graph<f64>) -> SubNetworkVars {
        SubNetwork::bind(self, g)
    }

    fn modality_order(&self) -> Vec<String> {
        vec![self.modality.clone()]
    }

    fn has_attention(&self) -> bool {
        false
    }

    fn forward_batch(
        &self,
        g: &mut Graph<f64>,
        vars: &SubNetworkVars,
        examples: &[&MultimodalExample],
    ) -> Result<BatchOutput, FusionError> {
        let head = vars
            .head
            .as_ref()
            .ok_or_else(|| LayerError::MissingHead(self.modality.clone()))?;
        let mut seqs = Vec::with_capacity(examples.len());
        for ex in examples {
            seqs.push(
                ex.sequence(&self.modality)
                    .ok_or_else(|| FusionError::MissingModality {
                        example: ex.id.clone(),
                        modality: self.modality.clone(),
                    })?,
            );
        }
        let emb = bilstm_encode_batch(g, vars, &seqs)?;
        Ok(BatchOutput {
            prediction: linear(g, head, emb)?,
            weights: None,
        })
    }
}

/// Outputs of one chunk, in chunk order.
struct ChunkPass {
    loss: Var,
    outputs: Vec<Vec<f64>>,
    weights: Option<Vec<Vec<f64>>>,
}

fn class_target(ex: &MultimodalExample, classes: usize) -> Result<usize> {
    match ex.class_index() {
        Some(c) if c < classes => Ok(c),
        _ => Err(TrainError::InvalidLabel {
            id: ex.id.clone(),
            label: ex.label,
            classes,
        }),
    }
}

/// Forward pass and mean loss over a chunk. Examples are grouped by their
/// per-modality sequence lengths so each group runs as one batched unroll.
fn forward_chunk<M: Trainable>(
    model: &M,
    g: &mut Graph<f64>,
    vars: &M::Vars,
    chunk: &[&MultimodalExample],
    task: Task,
    order: &[String],
) -> Result<ChunkPass> {
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut lookup: HashMap<Vec<usize>, usize> = HashMap::new();
    for (i, ex) in chunk.iter().enumerate() {
        let key: Vec<usize> = order
            .iter()
            .map(|m| ex.sequence(m).map_or(0, |s| s.timesteps()))
            .collect();
        let slot = *lookup.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(i);
    }

    let mut preds = Vec::with_capacity(groups.len());
    let mut weights = Vec::with_capacity(groups.len());
    let mut perm = Vec::with_capacity(chunk.len());
    for (_, members) in &groups {
        let refs: Vec<&MultimodalExample> = members.iter().map(|&i| chunk[i]).collect();
        let out = model.forward_batch(g, vars, &refs)?;
        preds.push(out.prediction);
        weights.push(out.weights);
        perm.extend_from_slice(members);
    }

    let stacked = g.concat(&preds, 1)?;
    let loss = match task {
        Task::Classification { classes } => {
            let targets = perm
                .iter()
                .map(|&i| class_target(chunk[i], classes))
                .collect::<Result<Vec<_>>>()?;
            let rows = g.transpose(stacked)?;
            g.cross_entropy(rows, &targets)?
        }
        Task::Regression => {
            let targets: Vec<f64> = perm.iter().map(|&i| chunk[i].label).collect();
            let t = g.constant(Tensor::row(targets));
            g.l1(stacked, t)?
        }
    };

    let (c, b) = (task.output_dim(), chunk.len());
    let vals = g.value(stacked);
    let mut outputs = vec![Vec::new(); b];
    for (col, &i) in perm.iter().enumerate() {
        outputs[i] = (0..c).map(|r| vals.at(r, col)).collect();
    }
    let weight_rows = if weights.iter().all(Option::is_some) && model.has_attention() {
        let mut rows = vec![Vec::new(); b];
        let mut col_base = 0;
        for (w, (_, members)) in weights.iter().zip(&groups) {
            let wv = g.value(w.expect("checked"));
            let m = wv.shape()[0];
            for (j, &i) in members.iter().enumerate() {
                rows[i] = (0..m).map(|r| wv.at(r, j)).collect();
            }
            col_base += members.len();
        }
        debug_assert_eq!(col_base, b);
        Some(rows)
    } else {
        None
    };
    Ok(ChunkPass {
        loss,
        outputs,
        weights: weight_rows,
    })
}

/// Class index (as `f64`) or score from one output vector.
fn decode(task: Task, output: &[f64]) -> f64 {
    match task {
        Task::Classification { .. } => argmax(output) as f64,
        Task::Regression => output[0],
    }
}

fn metric_of(task: Task, predictions: &[f64], examples: &[&MultimodalExample]) -> Metric {
    let name = MetricName::for_task(task);
    let value = match task {
        Task::Classification { .. } => {
            let p: Vec<usize> = predictions.iter().map(|&v| v as usize).collect();
            let l: Vec<usize> = examples.iter().map(|e| e.label as usize).collect();
            accuracy(&p, &l)
        }
        Task::Regression => {
            let t: Vec<f64> = examples.iter().map(|e| e.label).collect();
            mae(predictions, &t)
        }
    };
    Metric { name, value }
}

/// Metrics and per-example outputs on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: Metric,
    /// A^C for classification.
    pub accuracy: Option<f64>,
    /// MAE for regression.
    pub mae: Option<f64>,
    /// Sign-based two-class accuracy for regression.
    pub binary_accuracy: Option<f64>,
    /// Raw outputs: logits or a single score.
    pub outputs: Vec<Vec<f64>>,
    /// Predicted class index or score.
    pub predictions: Vec<f64>,
    /// Per-example attention weights, fusion order.
    pub attention: Option<Vec<Vec<f64>>>,
}

impl Evaluation {
    pub fn attention_means(&self) -> Option<Vec<f64>> {
        self.attention.as_deref().map(mean_weights)
    }
}

/// Batch size used by [`evaluate`] when none is given.
pub const EVAL_BATCH: usize = 256;

/// Evaluates `model` on `data`.
pub fn evaluate<M: Trainable>(
    model: &M,
    data: &[MultimodalExample],
    task: Task,
) -> Result<Evaluation> {
    evaluate_batched(model, data, task, EVAL_BATCH)
}

pub fn evaluate_batched<M: Trainable>(
    model: &M,
    data: &[MultimodalExample],
    task: Task,
    batch: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let order = model.modality_order();
    let refs: Vec<&MultimodalExample> = data.iter().collect();
    let mut loss_sum = 0.0;
    let mut outputs = Vec::with_capacity(data.len());
    let mut attention: Option<Vec<Vec<f64>>> = model.has_attention().then(Vec::new);
    for chunk in refs.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let pass = forward_chunk(model, &mut g, &vars, chunk, task, &order)?;
        loss_sum += g.value(pass.loss).item() * chunk.len() as f64;
        outputs.extend(pass.outputs);
        if let (Some(acc), Some(w)) = (attention.as_mut(), pass.weights) {
            acc.extend(w);
        }
    }
    let predictions: Vec<f64> = outputs.iter().map(|o| decode(task, o)).collect();
    let metric = metric_of(task, &predictions, &refs);
    let targets: Vec<f64> = data.iter().map(|e| e.label).collect();
    let (accuracy_v, mae_v, bin) = match task {
        Task::Classification { .. } => (Some(metric.value), None, None),
        Task::Regression => (
            None,
            Some(metric.value),
            Some(binary_accuracy(&predictions, &targets)),
        ),
    };
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        metric,
        accuracy: accuracy_v,
        mae: mae_v,
        binary_accuracy: bin,
        outputs,
        predictions,
        attention,
    })
}

/// Result of one early-stopped training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters from the best validation epoch.
    pub model: M,
    /// One train and one val record per completed epoch.
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Metric,
    pub epochs_run: usize,
}

impl<M> TrainOutcome<M> {
    /// Train-split attention means at the best validation epoch.
    pub fn best_train_attention(&self) -> Option<&[f64]> {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch && r.split == Split::Train)
            .and_then(|r| r.attention_means.as_deref())
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        let train: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.seconds)
            .collect();
        train.iter().sum::<f64>() / train.len().max(1) as f64
    }
}

/// Mini-batch training with early stopping on the validation metric.
/// `stage` names the run in divergence errors.
pub fn fit<M: Trainable>(
    mut model: M,
    train: &[MultimodalExample],
    val: &[MultimodalExample],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let task = cfg.task;
    let order = model.modality_order();
    let diverged = |epoch, what| TrainError::Divergence {
        stage: stage.to_string(),
        epoch,
        what,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience, MetricName::for_task(task));
    let mut best = model.clone();
    let mut best_val = None;
    let mut records = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        indices.shuffle(&mut rng);
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut outputs = vec![Vec::new(); train.len()];
        let mut weights: Vec<Vec<f64>> = Vec::new();
        for chunk_idx in indices.chunks(cfg.batch_size) {
            let chunk: Vec<&MultimodalExample> = chunk_idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let pass = forward_chunk(&model, &mut g, &vars, &chunk, task, &order)?;
            let loss = g.value(pass.loss).item();
            if !loss.is_finite() {
                return Err(diverged(epoch, "loss"));
            }
            g.backward(pass.loss)?;
            let grads = g.param_grads();
            optimizer_step(&mut model, &grads, &mut state, cfg).map_err(|e| match e {
                TrainError::NonFiniteGradient => diverged(epoch, "gradient"),
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            for (&i, o) in chunk_idx.iter().zip(pass.outputs) {
                outputs[i] = o;
            }
            if let Some(w) = pass.weights {
                weights.extend(w);
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let predictions: Vec<f64> = outputs.iter().map(|o| decode(task, o)).collect();
        let train_refs: Vec<&MultimodalExample> = train.iter().collect();
        records.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / train.len() as f64,
            metric: metric_of(task, &predictions, &train_refs),
            attention_means: model.has_attention().then(|| mean_weights(&weights)),
            seconds,
        });

        let start = Instant::now();
        let ev = evaluate(&model, val, task)?;
        if !ev.loss.is_finite() {
            return Err(diverged(epoch, "validation loss"));
        }
        records.push(EpochRecord {
            epoch,
            split: Split::Val,
            loss: ev.loss,
            metric: ev.metric,
            attention_means: ev.attention_means(),
            seconds: start.elapsed().as_secs_f64(),
        });
        epochs_run = epoch;
        if stopper.update(epoch, ev.metric.value) {
            best = model.clone();
            best_val = Some(ev.metric);
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        records,
        best_epoch: stopper.best_epoch,
        best_val: best_val.expect("at least one epoch"),
        epochs_run,
    })
}

// ---------------------------------------------------------------------------
// Curriculum

/// Stage 1: trains one sub-network (with its head) on its own modality.
pub fn pretrain_subnetwork(
    net: SubNetwork<f64>,
    train: &[MultimodalExample],
    val: &[MultimodalExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<SubNetwork<f64>>> {
    if !net.has_head() {
        return Err(LayerError::MissingHead(net.modality.clone()).into());
    }
    let restrict = |data: &[MultimodalExample]| -> Result<Vec<MultimodalExample>> {
        data.iter()
            .map(|e| {
                e.only(&net.modality).ok_or_else(|| {
                    FusionError::MissingModality {
                        example: e.id.clone(),
                        modality: net.modality.clone(),
                    }
                    .into()
                })
            })
            .collect()
    };
    let (tr, va) = (restrict(train)?, restrict(val)?);
    let stage = format!("pretraining '{}'", net.modality);
    fit(net, &tr, &va, cfg, &stage)
}

/// Strips heads and attaches a fresh attention block (or concatenation) and
/// fused head. Encoder parameters carry over unchanged.
pub fn assemble_man(
    nets: Vec<SubNetwork<f64>>,
    attention_dim: Option<usize>,
    task: Task,
    rng: &mut ChaCha8Rng,
) -> Result<ManModel<f64>> {
    Ok(ManModel::assemble(nets, attention_dim, task, rng)?)
}

/// Stage 2: end-to-end training of an assembled model; every parameter is
/// updated from the first step.
pub fn finetune_end_to_end(
    model: ManModel<f64>,
    train: &[MultimodalExample],
    val: &[MultimodalExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<ManModel<f64>>> {
    fit(model, train, val, cfg, "fine-tuning")
}

/// Same loop as [`finetune_end_to_end`] on randomly initialised encoders.
pub fn train_from_scratch(
    model: ManModel<f64>,
    train: &[MultimodalExample],
    val: &[MultimodalExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<ManModel<f64>>> {
    fit(model, train, val, cfg, "scratch training")
}

/// The trained artefact of a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Fused(ManModel<f64>),
    Unimodal(SubNetwork<f64>),
}

impl TrainedModel {
    pub fn evaluate(&self, data: &[MultimodalExample], task: Task) -> Result<Evaluation> {
        match self {
            TrainedModel::Fused(m) => evaluate(m, data, task),
            TrainedModel::Unimodal(n) => evaluate(n, data, task),
        }
    }

    pub fn modality_order(&self) -> Vec<String> {
        match self {
            TrainedModel::Fused(m) => m.modality_order(),
            TrainedModel::Unimodal(n) => vec![n.modality.clone()],
        }
    }

    pub fn has_attention(&self) -> bool {
        matches!(self, TrainedModel::Fused(m) if m.attention().is_some())
    }

    pub fn param_count(&self) -> usize {
        match self {
            TrainedModel::Fused(m) => m.param_count(),
            TrainedModel::Unimodal(n) => n.param_count(),
        }
    }
}

/// Everything one (variant, seed) pipeline produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: TrainedModel,
    /// Stage-1 records per modality, fusion order; empty without pre-training.
    pub pretrain: Vec<(String, TrainOutcome<SubNetwork<f64>>)>,
    /// Stage-2 (or only-stage) records.
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Metric,
    pub mean_epoch_seconds: f64,
    /// Train-split attention means at the best validation epoch.
    pub best_attention: Option<Vec<f64>>,
}

/// Seeds for parameter initialisation and for each training stage, derived
/// from one run seed so every stage has its own stream.
fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Runs a variant's full pipeline for one seed.
///
/// Initial encoder weights depend only on the seed, so the pre-trained and
/// scratch variants of one seed start from the same encoders.
pub fn run_pipeline(
    plan: &VariantPlan,
    train: &[MultimodalExample],
    val: &[MultimodalExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PipelineOutcome> {
    let mut init = ChaCha8Rng::seed_from_u64(stage_seed(seed, 0));
    let mut nets: Vec<SubNetwork<f64>> = plan.fresh_subnetworks(true, &mut init);
    let stage_cfg = |k: u64| TrainConfig {
        seed: stage_seed(seed, k),
        task: plan.task,
        ..*cfg
    };

    if plan.variant.is_unimodal() {
        let net = nets.pop().expect("one modality");
        let out = pretrain_subnetwork(net, train, val, &stage_cfg(1))?;
        return Ok(PipelineOutcome {
            mean_epoch_seconds: out.mean_epoch_seconds(),
            best_epoch: out.best_epoch,
            best_val: out.best_val,
            records: out.records,
            model: TrainedModel::Unimodal(out.model),
            pretrain: Vec::new(),
            best_attention: None,
        });
    }

    let mut pretrain = Vec::new();
    if plan.pretrain {
        let mut trained = Vec::with_capacity(nets.len());
        for (i, net) in nets.into_iter().enumerate() {
            let name = net.modality.clone();
            let out = pretrain_subnetwork(net, train, val, &stage_cfg(1 + i as u64))?;
            trained.push(out.model.clone());
            pretrain.push((name, out));
        }
        nets = trained;
    }
    let model = assemble_man(nets, plan.attention_dim, plan.task, &mut init)?;
    let fused_cfg = stage_cfg(100);
    let out = if plan.pretrain {
        finetune_end_to_end(model, train, val, &fused_cfg)?
    } else {
        train_from_scratch(model, train, val, &fused_cfg)?
    };
    Ok(PipelineOutcome {
        mean_epoch_seconds: out.mean_epoch_seconds(),
        best_attention: out.best_train_attention().map(<[f64]>::to_vec),
        best_epoch: out.best_epoch,
        best_val: out.best_val,
        records: out.records,
        model: TrainedModel::Fused(out.model),
        pretrain,
    })
}
