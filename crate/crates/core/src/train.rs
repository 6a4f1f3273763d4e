//! AdamW with per-group learning rates, a linear schedule, early stopping
//! and encoder freezing.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{self, Labels, PredictionSet};
use crate::model::{EmotionModel, ModelInput};
use crate::params::{ParamId, ParamStore};
use crate::qformer::TaskKind;
use crate::tensor::{RngState, Tensor};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// One 0/1 indicator per class.
    Multi(Vec<f64>),
    Single(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub target: Target,
}

/// Mean BCE-with-logits over every `[B, C]` entry for multi-label targets,
/// mean cross-entropy over `B` rows for single-label targets.
pub fn compute_loss(g: &mut Graph, logits: Var, targets: &[Target], task: TaskKind) -> Result<Var> {
    let &[b, c] = g.shape(logits) else {
        return Err(Error::Invalid(format!("logits must be [B, C], got {:?}", g.shape(logits))));
    };
    if targets.len() != b {
        return Err(Error::shape("compute_loss", &[b, c], &[targets.len()]));
    }
    match task {
        TaskKind::MultiLabel => {
            let mut flat = Vec::with_capacity(b * c);
            for t in targets {
                match t {
                    Target::Multi(v) if v.len() == c && v.iter().all(|&y| y == 0.0 || y == 1.0) => {
                        flat.extend_from_slice(v)
                    }
                    other => {
                        return Err(Error::Invalid(format!(
                            "expected {c} binary indicators, got {other:?}"
                        )))
                    }
                }
            }
            g.bce_with_logits(logits, &flat)
        }
        TaskKind::SingleLabel => {
            let classes = targets
                .iter()
                .map(|t| match t {
                    Target::Single(k) if *k < c => Ok(*k),
                    other => Err(Error::Invalid(format!(
                        "expected a class index below {c}, got {other:?}"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            g.cross_entropy(logits, &classes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub backbone_multiplier: f64,
    pub vision_multiplier: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub freeze_vision: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            backbone_multiplier: 0.1,
            vision_multiplier: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 50,
            patience: 5,
            batch_size: 64,
            freeze_vision: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.backbone_multiplier) || !in_unit(self.vision_multiplier) {
            return Err(Error::Config("learning-rate multipliers must lie in (0, 1]".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("patience, max_epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Classifier,
    QFormer,
    Vision,
}

impl GroupKind {
    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Classifier => "classifier",
            GroupKind::QFormer => "qformer",
            GroupKind::Vision => "vision",
        }
    }

    /// Group owning a parameter name, if any.
    pub fn of(name: &str) -> Option<Self> {
        if name.starts_with("classifier.") {
            Some(GroupKind::Classifier)
        } else if name.starts_with("qformer.") || name.starts_with("text.") {
            Some(GroupKind::QFormer)
        } else if name.starts_with("vision.") {
            Some(GroupKind::Vision)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub multiplier: f64,
    pub ids: Vec<ParamId>,
}

impl ParamGroup {
    pub fn lr(&self, cfg: &OptimConfig, scale: f64) -> f64 {
        cfg.base_lr * self.multiplier * scale
    }
}

/// Classifier at the base rate, Q-Former and text embedding at the backbone
/// rate, vision encoder at the vision rate. Frozen groups are left out.
pub fn make_param_groups(store: &ParamStore, cfg: &OptimConfig) -> Result<Vec<ParamGroup>> {
    let mut groups = vec![
        ParamGroup { kind: GroupKind::Classifier, multiplier: 1.0, ids: Vec::new() },
        ParamGroup { kind: GroupKind::QFormer, multiplier: cfg.backbone_multiplier, ids: Vec::new() },
        ParamGroup { kind: GroupKind::Vision, multiplier: cfg.vision_multiplier, ids: Vec::new() },
    ];
    let mut unassigned = Vec::new();
    for (id, name, _) in store.iter() {
        match GroupKind::of(name) {
            Some(kind) => groups[kind as usize].ids.push(id),
            None => unassigned.push(name.to_owned()),
        }
    }
    if !unassigned.is_empty() {
        return Err(Error::UnassignedParams(unassigned));
    }
    if cfg.freeze_vision {
        groups.retain(|g| g.kind != GroupKind::Vision);
    }
    groups.retain(|g| !g.ids.is_empty());
    Ok(groups)
}

/// Optimizer moments, indexed by parameter position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLr {
    pub kind: GroupKind,
    pub lr: f64,
}

/// One decoupled-weight-decay Adam step. Returns the learning rate used per
/// group. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    store: &mut ParamStore,
    groups: &[ParamGroup],
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &OptimConfig,
    lr_scale: f64,
) -> Result<Vec<GroupLr>> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Invalid("optimizer state does not match parameters".into()));
    }
    for g in groups {
        for &id in &g.ids {
            if let Some(grad) = grads.get(id) {
                if grad.len() != store.tensor(id).len() {
                    return Err(Error::shape("adamw_step", store.tensor(id).shape(), &[grad.len()]));
                }
                if let Some(index) = grad.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: store.name(id).to_owned(),
                        index,
                    });
                }
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut used = Vec::with_capacity(groups.len());
    for group in groups {
        let lr = group.lr(cfg, lr_scale);
        let decay = 1.0 - lr * cfg.weight_decay;
        for &id in &group.ids {
            let grad = grads.get(id);
            let m = &mut state.m[id.0];
            let v = &mut state.v[id.0];
            let theta = store.tensor_mut(id).data_mut();
            if m.len() != theta.len() || v.len() != theta.len() {
                return Err(Error::Invalid("optimizer moments do not match parameter shapes".into()));
            }
            for i in 0..theta.len() {
                let gi = grad.map_or(0.0, |g| g[i]);
                theta[i] *= decay;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        used.push(GroupLr { kind: group.kind, lr });
    }
    Ok(used)
}

/// `max(1 - step / total, 1 / total)`.
pub fn linear_schedule(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let step = step.min(total_steps);
    let floor = 1.0 / total_steps as f64;
    (1.0 - step as f64 / total_steps as f64).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_improvement = 0;
            return StopDecision::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_metric: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tlr\tval_metric";

    pub fn to_line(&self) -> String {
        format!("{}\t{:.17e}\t{:.17e}\t{:.17e}", self.epoch, self.train_loss, self.lr, self.val_metric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLr {
    pub step: usize,
    pub scale: f64,
    pub groups: Vec<GroupLr>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub adam: AdamState,
    pub stopper: EarlyStopping,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(store: &ParamStore, patience: usize) -> Self {
        Self {
            epoch: 0,
            step: 0,
            adam: AdamState::new(store),
            stopper: EarlyStopping::new(patience),
            history: Vec::new(),
            stopped: false,
        }
    }

    /// Adds the optimizer moments and progress counters to `ck`.
    pub fn write_into(&self, ck: &mut Checkpoint, store: &ParamStore) -> Result<()> {
        ck.meta.insert("train.epoch".into(), self.epoch.to_string());
        ck.meta.insert("train.step".into(), self.step.to_string());
        ck.meta.insert("train.adam_t".into(), self.adam.t.to_string());
        ck.meta.insert("train.stopped".into(), self.stopped.to_string());
        ck.meta.insert("train.stopper".into(), serde_json::to_string(&self.stopper)?);
        ck.meta.insert("train.history".into(), serde_json::to_string(&self.history)?);
        for (id, name, t) in store.iter() {
            ck.push_tensor(format!("optim.m.{name}"), Tensor::new(t.shape(), self.adam.m[id.0].clone())?)?;
            ck.push_tensor(format!("optim.v.{name}"), Tensor::new(t.shape(), self.adam.v[id.0].clone())?)?;
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, store: &ParamStore) -> Result<Self> {
        fn num<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
            ck.meta(key)?
                .parse()
                .map_err(|_| Error::Invalid(format!("checkpoint field `{key}` is malformed")))
        }
        let mut adam = AdamState::new(store);
        adam.t = num(ck, "train.adam_t")?;
        for (id, name, t) in store.iter() {
            for (prefix, slot) in [("optim.m", &mut adam.m), ("optim.v", &mut adam.v)] {
                let key = format!("{prefix}.{name}");
                let stored = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{key}`")))?;
                if stored.shape() != t.shape() {
                    return Err(Error::shape("optimizer state", t.shape(), stored.shape()));
                }
                slot[id.0] = stored.data().to_vec();
            }
        }
        Ok(Self {
            epoch: num(ck, "train.epoch")?,
            step: num(ck, "train.step")?,
            adam,
            stopper: serde_json::from_str(ck.meta("train.stopper")?)?,
            history: serde_json::from_str(ck.meta("train.history")?)?,
            stopped: num(ck, "train.stopped")?,
        })
    }
}

/// Validation score: mAP for multi-label tasks (0 when undefined),
/// accuracy for single-label tasks.
pub fn evaluate(model: &EmotionModel, data: &[Example]) -> Result<f64> {
    let pred = predict_set(model, data)?;
    let value = match model.config.task() {
        TaskKind::MultiLabel => metrics::mean_average_precision(&pred),
        TaskKind::SingleLabel => metrics::accuracy(&pred),
    };
    Ok(value.unwrap_or(0.0))
}

pub fn predict_set(model: &EmotionModel, data: &[Example]) -> Result<PredictionSet> {
    let scores = data
        .iter()
        .map(|ex| model.predict(&ex.input))
        .collect::<Result<Vec<_>>>()?;
    let labels = match model.config.task() {
        TaskKind::MultiLabel => Labels::Multi(
            data.iter()
                .map(|ex| match &ex.target {
                    Target::Multi(v) => Ok(v.iter().map(|&y| y == 1.0).collect()),
                    Target::Single(_) => Err(Error::Invalid("single-label target in a multi-label task".into())),
                })
                .collect::<Result<_>>()?,
        ),
        TaskKind::SingleLabel => Labels::Single(
            data.iter()
                .map(|ex| match ex.target {
                    Target::Single(k) => Ok(k),
                    Target::Multi(_) => Err(Error::Invalid("multi-label target in a single-label task".into())),
                })
                .collect::<Result<_>>()?,
        ),
    };
    PredictionSet::new(scores, labels)
}

pub struct Trainer {
    pub model: EmotionModel,
    pub cfg: OptimConfig,
    pub seed: u64,
    pub state: TrainState,
    pub groups: Vec<ParamGroup>,
    /// Per-step learning rates actually applied.
    pub lr_log: Vec<StepLr>,
    pub best: Option<EmotionModel>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: EmotionModel,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: EmotionModel, cfg: OptimConfig, seed: u64) -> Result<Self> {
        let state = TrainState::new(&model.params, cfg.patience);
        Self::resume(model, cfg, seed, state)
    }

    pub fn resume(model: EmotionModel, cfg: OptimConfig, seed: u64, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let groups = make_param_groups(&model.params, &cfg)?;
        if state.adam.m.len() != model.params.len() {
            return Err(Error::Invalid("training state does not match the model".into()));
        }
        Ok(Self {
            model,
            cfg,
            seed,
            state,
            groups,
            lr_log: Vec::new(),
            best: None,
        })
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.cfg.max_epochs * train_len.div_ceil(self.cfg.batch_size)
    }

    fn frozen_ids(&self) -> Vec<ParamId> {
        if self.cfg.freeze_vision {
            self.model.vision_param_ids()
        } else {
            Vec::new()
        }
    }

    /// One pass over `train`; returns the mean per-sample loss.
    pub fn run_epoch(&mut self, train: &[Example]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Invalid("empty training split".into()));
        }
        let total = self.total_steps(train.len());
        let mut shuffle = RngState::new(self.seed)
            .derive(SHUFFLE_STREAM)
            .derive(self.state.epoch as u64);
        let dropout_root = RngState::new(self.seed).derive(DROPOUT_STREAM);
        let frozen = self.frozen_ids();
        let task = self.model.config.task();
        let mut loss_sum = 0.0;
        for batch in crate::data::batch_indices(train.len(), self.cfg.batch_size, &mut shuffle) {
            let mut grads = Gradients::default();
            let scale = 1.0 / batch.len() as f64;
            for (slot, &i) in batch.iter().enumerate() {
                let stream = (self.state.step as u64) << 20 | slot as u64;
                let mut g = Graph::training(dropout_root.derive(stream));
                g.freeze(frozen.iter().copied());
                let logits = self.model.forward(&mut g, &train[i].input)?;
                let loss = compute_loss(&mut g, logits, std::slice::from_ref(&train[i].target), task)?;
                loss_sum += g.value(loss).data()[0];
                grads.add_scaled(&g.backward(loss)?, scale);
            }
            let lr_scale = linear_schedule(self.state.step, total);
            let used = adamw_step(
                &mut self.model.params,
                &self.groups,
                &grads,
                &mut self.state.adam,
                &self.cfg,
                lr_scale,
            )?;
            self.lr_log.push(StepLr {
                step: self.state.step,
                scale: lr_scale,
                groups: used,
            });
            self.state.step += 1;
        }
        Ok(loss_sum / train.len() as f64)
    }

    /// Trains until early stopping or `max_epochs`, calling `on_epoch` after
    /// each epoch. Epoch numbers continue from a resumed state.
    pub fn fit(
        &mut self,
        train: &[Example],
        val: &[Example],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord, StopDecision) -> Result<()>,
    ) -> Result<FitOutcome> {
        if val.is_empty() {
            return Err(Error::Invalid("empty validation split".into()));
        }
        while !self.state.stopped && self.state.epoch < self.cfg.max_epochs {
            let train_loss = self.run_epoch(train)?;
            self.state.epoch += 1;
            let val_metric = evaluate(&self.model, val)?;
            let lr = self.lr_log.last().map_or(self.cfg.base_lr, |s| self.cfg.base_lr * s.scale);
            let record = EpochRecord {
                epoch: self.state.epoch,
                train_loss,
                lr,
                val_metric,
            };
            let decision = self.state.stopper.update(self.state.epoch, val_metric);
            if decision == StopDecision::Improved {
                self.best = Some(self.model.clone());
            }
            if decision == StopDecision::Stop {
                self.state.stopped = true;
            }
            self.state.history.push(record.clone());
            log::info!(
                "epoch {} loss {:.6} lr {:.3e} val {:.6}",
                record.epoch,
                record.train_loss,
                record.lr,
                record.val_metric
            );
            on_epoch(self, &record, decision)?;
        }
        let best = self.best.clone().unwrap_or_else(|| self.model.clone());
        Ok(FitOutcome {
            best,
            best_epoch: self.state.stopper.best_epoch,
            best_metric: self.state.stopper.best.unwrap_or(f64::NAN),
            history: self.state.history.clone(),
        })
    }
}
