//! Multitask training: task loops, loss scaling, the unfreezing controller,
//! evaluation, checkpoints and the `fit` driver.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::FreezeDirective;
use crate::data::{Batch, TaskData, TaskLoader, Vocab};
use crate::error::{Error, Result};
use crate::heads::{ModelConfig, MultitaskModel, Task};
use crate::losses::{composite_loss, contrastive, LossKind, LossSpec, Target, TaskTerm};
use crate::nn::{fnv1a, load_state_dict, state_dict, ForwardCtx};
use crate::optim::{build_task_optimizers, Optimizer, OptimConfig, OptimKind, TaskOptimizers};
use crate::tensor::memory::{self, MemoryLedger};
use crate::tensor::{autocast, no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FineTuneMode {
    #[serde(rename = "last-layer")]
    LastLayer,
    #[serde(rename = "full-model")]
    FullModel,
    #[serde(rename = "iterative")]
    Iterative,
}

impl FineTuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FineTuneMode::LastLayer => "last-layer",
            FineTuneMode::FullModel => "full-model",
            FineTuneMode::Iterative => "iterative",
        }
    }
}

impl std::str::FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "last-layer" => Ok(FineTuneMode::LastLayer),
            "full-model" => Ok(FineTuneMode::FullModel),
            "iterative" => Ok(FineTuneMode::Iterative),
            other => Err(Error::Config(format!("unknown fine-tune mode '{other}'"))),
        }
    }
}

/// How task losses are scheduled within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopKind {
    /// Each task's loader in turn, `num_trains` times.
    #[serde(rename = "sequential")]
    Sequential,
    /// One batch per task, round robin.
    #[serde(rename = "interleaved")]
    Interleaved,
    /// Summed three-task loss per step under a single optimizer.
    #[serde(rename = "composite")]
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_id: String,
    pub model: ModelConfig,
    pub fine_tune_mode: FineTuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub amp: bool,
    /// Enabled tasks, indexed sst, para, sts.
    pub tasks: [bool; 3],
    pub num_trains: [usize; 3],
    pub losses: [LossSpec; 3],
    pub optim: OptimConfig,
    pub loop_kind: LoopKind,
    /// Epoch at which paraphrase training begins.
    pub quora_start_epoch: usize,
    /// Abort when the ledger's peak exceeds this many bytes.
    pub memory_cap: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        let mut optim = OptimConfig::new(OptimKind::Adamax, 2e-3);
        optim.schedule = crate::optim::LrSchedule::Multiplicative { gamma: 0.9 };
        Self {
            run_id: format!("desk-{seed}"),
            model: ModelConfig::desk(seed),
            fine_tune_mode: FineTuneMode::FullModel,
            epochs: 6,
            batch_size: 32,
            amp: false,
            tasks: [true; 3],
            num_trains: [1; 3],
            losses: [
                LossSpec::default_for(Task::Sst),
                LossSpec::default_for(Task::Para),
                LossSpec::default_for(Task::Sts),
            ],
            optim,
            loop_kind: LoopKind::Sequential,
            quora_start_epoch: 0,
            memory_cap: None,
            checkpoint: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tasks.iter().any(|&t| t) {
            return Err(Error::Config("at least one task must be enabled".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.num_trains.contains(&0) {
            return Err(Error::Config("num trains must be at least 1".into()));
        }
        for (i, spec) in self.losses.iter().enumerate() {
            if spec.task != Task::ALL[i] {
                return Err(Error::Config(format!("loss spec {i} is for task {}", spec.task)));
            }
            spec.validate()?;
        }
        self.model.encoder.validate()?;
        self.optim.validate()
    }

    fn enabled(&self, task: Task, epoch: usize) -> bool {
        self.tasks[task.index()] && !(task == Task::Para && epoch < self.quora_start_epoch)
    }
}

/// Freezing directive for `epoch`. Iterative mode unlocks the top quarter,
/// half and three quarters of the layers on epochs 1 to 3 and everything after.
pub fn unfreezing_directive(mode: FineTuneMode, epoch: usize, num_layers: usize) -> FreezeDirective {
    let n = num_layers;
    match mode {
        FineTuneMode::LastLayer => FreezeDirective::FreezeAll,
        FineTuneMode::FullModel => FreezeDirective::UnfreezeAll,
        FineTuneMode::Iterative => match epoch {
            0 => FreezeDirective::FreezeAll,
            1 => FreezeDirective::UnfreezeTop(n.div_ceil(4)),
            2 => FreezeDirective::UnfreezeTop(n.div_ceil(2)),
            3 => FreezeDirective::UnfreezeTop((3 * n).div_ceil(4)),
            _ => FreezeDirective::UnfreezeAll,
        },
    }
}

/// Dynamic loss scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f32,
    pub growth: f32,
    pub backoff: f32,
    pub interval: u32,
    pub clean_steps: u32,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self { scale: 65536.0, growth: 2.0, backoff: 0.5, interval: 200, clean_steps: 0 }
    }
}

impl LossScaler {
    pub fn with_scale(scale: f32) -> Self {
        Self { scale, ..Self::default() }
    }

    fn update(&mut self, overflow: bool) {
        if overflow {
            self.scale *= self.backoff;
            self.clean_steps = 0;
        } else {
            self.clean_steps += 1;
            if self.clean_steps >= self.interval {
                self.scale *= self.growth;
                self.clean_steps = 0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

/// Backward on `scale * loss` (or plain `loss` without a scaler).
pub fn scaled_backward(loss: &Tensor, scaler: Option<&LossScaler>) -> Result<()> {
    match scaler {
        Some(s) => loss.mul_scalar(s.scale).backward(),
        None => loss.backward(),
    }
}

/// Divide gradients by the scale; if any is non-finite drop them all, back
/// off the scale and skip the step.
pub fn unscale_and_step(opt: &mut Optimizer, scaler: Option<&mut LossScaler>) -> StepOutcome {
    let Some(s) = scaler else {
        opt.step();
        return StepOutcome::Applied;
    };
    let inv = 1.0 / s.scale;
    let mut finite = true;
    for (_, p) in opt.params() {
        p.with_grad_mut(|g| {
            if let Some(g) = g {
                for x in g.iter_mut() {
                    *x *= inv;
                    finite &= x.is_finite();
                }
            }
        });
    }
    s.update(!finite);
    if finite {
        opt.step();
        StepOutcome::Applied
    } else {
        opt.zero_grad();
        StepOutcome::Skipped
    }
}

/// One optimizer step: clear grads, run `forward` (under autocast when a
/// scaler is given), compute `loss` on its output in full precision, then
/// backward, unscale and step.
pub fn amp_step(
    opt: &mut Optimizer,
    scaler: Option<&mut LossScaler>,
    forward: impl FnOnce() -> Result<Tensor>,
    loss: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<(f32, StepOutcome)> {
    opt.zero_grad();
    let out = autocast(scaler.is_some(), forward)?;
    let l = loss(&out)?;
    let value = l.item();
    scaled_backward(&l, scaler.as_deref())?;
    Ok((value, unscale_and_step(opt, scaler)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub sst_acc: f64,
    pub para_acc: f64,
    pub sts_pearson: f64,
    pub overall: f64,
}

/// Mean of the two accuracies and the Pearson correlation mapped to [0, 1].
pub fn overall_score(sst_acc: f64, para_acc: f64, sts_pearson: f64) -> f64 {
    (sst_acc + para_acc + (sts_pearson + 1.0) / 2.0) / 3.0
}

/// Round to three decimals as printed in score tables. Rounding to six places
/// first keeps binary noise from pulling exact halves down.
pub fn round3(x: f64) -> f64 {
    ((x * 1e6).round() / 1e3).round() / 1e3
}

impl Scores {
    pub fn new(sst_acc: f64, para_acc: f64, sts_pearson: f64) -> Self {
        Self { sst_acc, para_acc, sts_pearson, overall: overall_score(sst_acc, para_acc, sts_pearson) }
    }
}

/// Sample Pearson correlation, or `None` when either side is constant.
pub fn pearson(x: &[f32], y: &[f32]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let my = y[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] as f64 - mx, y[i] as f64 - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Raw head outputs on the dev sets: SST logits row-major `[N, 5]`,
/// paraphrase logits and similarity scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskOutputs {
    pub sst: Vec<f32>,
    pub para: Vec<f32>,
    pub sts: Vec<f32>,
}

/// Dev-set labels in loader order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DevLabels {
    pub sst: Vec<usize>,
    pub para: Vec<f32>,
    pub sts: Vec<f32>,
}

/// Task loaders, indexed sst, para, sts.
#[derive(Debug, Clone)]
pub struct Loaders {
    pub tasks: [Option<TaskLoader>; 3],
}

impl Loaders {
    pub fn new(data: &TaskData, cfg: &ModelConfig, batch_size: usize, enabled: [bool; 3]) -> Result<Self> {
        let vocab = Vocab::new(cfg.encoder.vocab_size)?;
        let max_len = cfg.encoder.max_seq_len;
        let mk = |t: Task| -> Result<Option<TaskLoader>> {
            if enabled[t.index()] {
                TaskLoader::new(t, data, &vocab, max_len, batch_size).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self { tasks: [mk(Task::Sst)?, mk(Task::Para)?, mk(Task::Sts)?] })
    }

    pub fn get(&self, task: Task) -> Option<&TaskLoader> {
        self.tasks[task.index()].as_ref()
    }

    fn require(&self, task: Task) -> Result<&TaskLoader> {
        match self.get(task) {
            Some(l) if !l.is_empty() => Ok(l),
            _ => Err(Error::EmptyLoader(task.as_str())),
        }
    }

    pub fn labels(&self) -> Result<DevLabels> {
        let mut out = DevLabels::default();
        for task in Task::ALL {
            for b in self.require(task)?.batches(None)? {
                match b {
                    Batch::Sst { labels, .. } => out.sst.extend(labels),
                    Batch::Pair { targets, .. } if task == Task::Para => out.para.extend(targets),
                    Batch::Pair { targets, .. } => out.sts.extend(targets),
                }
            }
        }
        Ok(out)
    }
}

/// Eval-mode head outputs on every task of `dev`.
pub fn predict_outputs(model: &MultitaskModel, dev: &Loaders) -> Result<TaskOutputs> {
    no_grad(|| {
        let mut ctx = ForwardCtx::eval();
        let mut out = TaskOutputs::default();
        for task in Task::ALL {
            for b in dev.require(task)?.batches(None)? {
                match (task, b) {
                    (Task::Sst, Batch::Sst { ids, .. }) => out.sst.extend(model.predict_sentiment(&ids, &mut ctx)?.to_vec()),
                    (Task::Para, Batch::Pair { a, b, .. }) => {
                        out.para.extend(model.predict_paraphrase(&a, &b, &mut ctx)?.to_vec())
                    }
                    (Task::Sts, Batch::Pair { a, b, .. }) => {
                        out.sts.extend(model.predict_similarity(&a, &b, &mut ctx)?.to_vec())
                    }
                    _ => unreachable!("loader batches match their task"),
                }
            }
        }
        Ok(out)
    })
}

/// Score raw outputs against labels. Constant STS predictions score 0 with a warning.
pub fn score_outputs(out: &TaskOutputs, labels: &DevLabels) -> Result<Scores> {
    let c = crate::heads::SST_CLASSES;
    if out.sst.len() != labels.sst.len() * c || out.para.len() != labels.para.len() || out.sts.len() != labels.sts.len() {
        return Err(Error::Shape { op: "score_outputs", msg: "outputs and labels differ in length".into() });
    }
    if labels.sst.is_empty() || labels.para.is_empty() || labels.sts.is_empty() {
        return Err(Error::EmptyLoader("dev"));
    }
    let argmax = |row: &[f32]| {
        row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
    };
    let sst_hits = out.sst.chunks(c).zip(&labels.sst).filter(|(r, &l)| argmax(r) == l).count();
    let para_hits = out
        .para
        .iter()
        .zip(&labels.para)
        .filter(|(&z, &y)| ((1.0 / (1.0 + (-z).exp()) > 0.5) as u8 as f32) == y)
        .count();
    let r = pearson(&out.sts, &labels.sts).unwrap_or_else(|| {
        log::warn!("STS predictions are constant; correlation recorded as 0");
        0.0
    });
    Ok(Scores::new(
        sst_hits as f64 / labels.sst.len() as f64,
        para_hits as f64 / labels.para.len() as f64,
        r,
    ))
}

pub fn evaluate(model: &MultitaskModel, dev: &Loaders) -> Result<Scores> {
    score_outputs(&predict_outputs(model, dev)?, &dev.labels()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub task: Task,
    pub loss: f32,
    pub outcome: StepOutcome,
    /// Ledger bytes held after the forward pass and before backward.
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEpochMetrics {
    pub task: Task,
    pub epoch: usize,
    pub wall_ms: f64,
    pub peak_bytes: u64,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub directive: String,
    pub tasks: Vec<TaskEpochMetrics>,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_overall: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl RunMetrics {
    pub fn best_scores(&self) -> Option<Scores> {
        self.best_epoch.map(|e| self.epochs[e].scores)
    }

    /// Mean per-task epoch wall time and peak bytes over all records.
    pub fn averages(&self) -> (f64, f64) {
        let all: Vec<&TaskEpochMetrics> = self.epochs.iter().flat_map(|e| &e.tasks).collect();
        if all.is_empty() {
            return (0.0, 0.0);
        }
        let n = all.len() as f64;
        (
            all.iter().map(|t| t.wall_ms).sum::<f64>() / n,
            all.iter().map(|t| t.peak_bytes as f64).sum::<f64>() / n,
        )
    }

    /// One row per task per epoch: run_id, task, epoch, wall_ms, peak_bytes and scores.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "run_id", "task", "epoch", "wall_ms", "peak_bytes", "sst_acc", "para_acc", "sts_pearson", "overall",
        ])?;
        for e in &self.epochs {
            for t in &e.tasks {
                wr.write_record([
                    self.run_id.clone(),
                    t.task.to_string(),
                    t.epoch.to_string(),
                    format!("{:.3}", t.wall_ms),
                    t.peak_bytes.to_string(),
                    format!("{:.6}", e.scores.sst_acc),
                    format!("{:.6}", e.scores.para_acc),
                    format!("{:.6}", e.scores.sts_pearson),
                    format!("{:.6}", e.scores.overall),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"MBPEFTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub best_overall: f64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Write the model to `path`: magic, u32 version, u64 header length, JSON
/// header, then every tensor as little-endian f32 in header order.
pub fn save_checkpoint(path: &Path, model: &MultitaskModel, best_overall: f64, epoch: usize) -> Result<()> {
    let state = state_dict(model);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.cfg,
        best_overall,
        epoch,
        tensors: state.iter().map(|(p, s, _)| TensorEntry { path: p.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 20 + state.iter().map(|(_, _, v)| v.len() * 4).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, v) in &state {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MultitaskModel, CheckpointHeader)> {
    let err = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| err("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(err(format!("header version {}", header.version)));
    }
    let model = MultitaskModel::new(header.config)?;
    let mut offset = 20 + hlen;
    let mut state = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| err(format!("truncated payload at {}", t.path)))?;
        let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        state.push((t.path.clone(), t.shape.clone(), vals));
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(err("trailing bytes after payload".into()));
    }
    load_state_dict(&model, &state).map_err(|e| err(e.to_string()))?;
    Ok((model, header))
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a(&bytes)
}

/// Owns a model, its optimizers and loaders for one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: MultitaskModel,
    pub opts: TaskOptimizers,
    joint: Option<Optimizer>,
    pub scaler: Option<LossScaler>,
    pub train: Loaders,
    pub dev: Loaders,
    pub metrics: RunMetrics,
    step_counter: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: &TaskData, dev: &TaskData) -> Result<Self> {
        cfg.validate()?;
        let model = MultitaskModel::new(cfg.model)?;
        Self::with_model(cfg, model, train, dev)
    }

    pub fn with_model(cfg: TrainConfig, model: MultitaskModel, train: &TaskData, dev: &TaskData) -> Result<Self> {
        cfg.validate()?;
        let opts = build_task_optimizers(&model, &cfg.optim)?;
        let joint = (cfg.loop_kind == LoopKind::Composite).then(|| {
            let mut seen = HashSet::new();
            let mut params = Vec::new();
            for task in Task::ALL {
                for (p, t) in model.task_parameters(task) {
                    if seen.insert(t.id()) {
                        params.push((p, t));
                    }
                }
            }
            Optimizer::new(cfg.optim.kind, cfg.optim.hyper(Task::Sst), params)
        });
        let train_loaders = Loaders::new(train, &cfg.model, cfg.batch_size, cfg.tasks)?;
        let dev_loaders = Loaders::new(dev, &cfg.model, cfg.batch_size.max(64), [true; 3])?;
        let scaler = cfg.amp.then(LossScaler::default);
        let metrics = RunMetrics { run_id: cfg.run_id.clone(), ..RunMetrics::default() };
        Ok(Self {
            cfg,
            model,
            opts,
            joint,
            scaler,
            train: train_loaders,
            dev: dev_loaders,
            metrics,
            step_counter: 0,
        })
    }

    /// Apply the epoch's freezing directive and learning rates.
    pub fn prepare_epoch(&mut self, epoch: usize) -> Result<FreezeDirective> {
        let d = unfreezing_directive(self.cfg.fine_tune_mode, epoch, self.cfg.model.encoder.num_layers);
        self.model.apply_directive(d)?;
        self.opts.schedule(epoch);
        if let Some(j) = &mut self.joint {
            j.set_lr(self.cfg.optim.task_lr(Task::Sst, epoch));
        }
        Ok(d)
    }

    fn check_cap(&self) -> Result<()> {
        if let Some(cap) = self.cfg.memory_cap {
            let peak = memory::peak_bytes();
            if peak > cap {
                return Err(Error::MemoryCap { peak, cap });
            }
        }
        Ok(())
    }

    fn output(&self, task: Task, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Tensor> {
        match (task, batch) {
            (Task::Sst, Batch::Sst { ids, .. }) => self.model.predict_sentiment(ids, ctx),
            (Task::Para, Batch::Pair { a, b, .. }) => self.model.predict_paraphrase(a, b, ctx),
            (Task::Sts, Batch::Pair { a, b, .. }) => self.model.predict_similarity(a, b, ctx),
            _ => Err(Error::Config(format!("batch does not match task {task}"))),
        }
    }

    fn target(batch: &Batch) -> Target<'_> {
        match batch {
            Batch::Sst { labels, .. } => Target::Classes(labels),
            Batch::Pair { targets, .. } => Target::Values(targets),
        }
    }

    /// One optimizer step of `task` on `batch`.
    pub fn task_step(&mut self, epoch: usize, task: Task, batch: &Batch) -> Result<StepRecord> {
        self.step_counter += 1;
        let mut ctx = ForwardCtx::train(mix(self.cfg.seed, &[epoch as u64, task.index() as u64, self.step_counter]));
        let spec = self.cfg.losses[task.index()];
        let amp = self.scaler.is_some();
        let opt_task = task;
        for (_, p) in self.opts.get(opt_task).params() {
            p.zero_grad();
        }
        let base = memory::live_bytes();
        let out = autocast(amp, || -> Result<Tensor> {
            if spec.kind == LossKind::Contrastive {
                let Batch::Pair { a, b, .. } = batch else {
                    return Err(Error::Config("contrastive loss needs pair batches".into()));
                };
                let (e1, e2) = self.model.sim_embeddings(a, b, &mut ctx)?;
                concat_pair(&e1, &e2)
            } else {
                self.output(task, batch, &mut ctx)
            }
        })?;
        let activation_bytes = memory::live_bytes().saturating_sub(base);
        self.check_cap()?;
        let loss = if spec.kind == LossKind::Contrastive {
            let h = out.dim(1) / 2;
            let (e1, e2) = (out.narrow(1, 0, h)?, out.narrow(1, h, h)?);
            let Target::Values(y) = Self::target(batch) else { unreachable!("pair batch") };
            contrastive(&e1, &e2, y, spec.margin, spec.convention)?
        } else {
            spec.apply(&out.cast(crate::tensor::DType::F32), Self::target(batch))?
        };
        let value = loss.item();
        scaled_backward(&loss, self.scaler.as_ref())?;
        drop(out);
        let outcome = unscale_and_step(self.opts.get_mut(opt_task), self.scaler.as_mut());
        self.check_cap()?;
        let rec = StepRecord { epoch, task, loss: value, outcome, activation_bytes };
        self.metrics.steps.push(rec);
        Ok(rec)
    }

    fn shuffle_seed(&self, epoch: usize, task: Task, rep: usize) -> u64 {
        mix(self.cfg.seed, &[0xda7a, epoch as u64, task.index() as u64, rep as u64])
    }

    fn enabled_tasks(&self, epoch: usize) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.cfg.enabled(t, epoch)).collect()
    }

    pub fn train_epoch_sequential(&mut self, epoch: usize) -> Result<Vec<TaskEpochMetrics>> {
        let mut out = Vec::new();
        for task in self.enabled_tasks(epoch) {
            let loader = self.train.require(task)?.clone();
            memory::reset_peak();
            let start = Instant::now();
            let (mut steps, mut total) = (0usize, 0f64);
            for rep in 0..self.cfg.num_trains[task.index()] {
                for batch in loader.batches(Some(self.shuffle_seed(epoch, task, rep)))? {
                    let r = self.task_step(epoch, task, &batch)?;
                    steps += 1;
                    total += r.loss as f64;
                }
            }
            out.push(TaskEpochMetrics {
                task,
                epoch,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                peak_bytes: memory::peak_bytes(),
                steps,
                mean_loss: total / steps.max(1) as f64,
            });
        }
        Ok(out)
    }

    /// Round robin over the enabled tasks, one batch each; an exhausted loader
    /// drops out for the rest of the epoch.
    pub fn train_epoch_interleaved(&mut self, epoch: usize) -> Result<Vec<TaskEpochMetrics>> {
        let tasks = self.enabled_tasks(epoch);
        let mut queues = Vec::new();
        for &t in &tasks {
            let loader = self.train.require(t)?;
            let mut all = Vec::new();
            for rep in 0..self.cfg.num_trains[t.index()] {
                all.extend(loader.batches(Some(self.shuffle_seed(epoch, t, rep)))?);
            }
            queues.push(all.into_iter());
        }
        let mut stats: Vec<(f64, u64, usize, f64)> = vec![(0.0, 0, 0, 0.0); tasks.len()];
        memory::reset_peak();
        let mut live: Vec<bool> = vec![true; tasks.len()];
        while live.iter().any(|&l| l) {
            for i in 0..tasks.len() {
                if !live[i] {
                    continue;
                }
                let Some(batch) = queues[i].next() else {
                    live[i] = false;
                    continue;
                };
                memory::reset_peak();
                let start = Instant::now();
                let r = self.task_step(epoch, tasks[i], &batch)?;
                let s = &mut stats[i];
                s.0 += start.elapsed().as_secs_f64() * 1e3;
                s.1 = s.1.max(memory::peak_bytes());
                s.2 += 1;
                s.3 += r.loss as f64;
            }
        }
        Ok(tasks
            .iter()
            .zip(stats)
            .map(|(&task, (wall_ms, peak_bytes, steps, total))| TaskEpochMetrics {
                task,
                epoch,
                wall_ms,
                peak_bytes,
                steps,
                mean_loss: total / steps.max(1) as f64,
            })
            .collect())
    }

    /// Summed loss over aligned batches of all three tasks, one joint step each.
    pub fn train_epoch_composite(&mut self, epoch: usize) -> Result<Vec<TaskEpochMetrics>> {
        let mut lists = Vec::new();
        for t in Task::ALL {
            lists.push(self.train.require(t)?.batches(Some(self.shuffle_seed(epoch, t, 0)))?);
        }
        let n = lists.iter().map(Vec::len).min().unwrap_or(0);
        memory::reset_peak();
        let start = Instant::now();
        let mut total = 0f64;
        let specs = self.cfg.losses;
        for i in 0..n {
            self.step_counter += 1;
            let mut ctx = ForwardCtx::train(mix(self.cfg.seed, &[epoch as u64, 9, self.step_counter]));
            let joint = self.joint.as_mut().expect("composite loop has a joint optimizer");
            joint.zero_grad();
            let amp = self.scaler.is_some();
            let base = memory::live_bytes();
            let mut outs = Vec::new();
            for (t, list) in Task::ALL.iter().zip(&lists) {
                let o = autocast(amp, || match (t, &list[i]) {
                    (Task::Sst, Batch::Sst { ids, .. }) => self.model.predict_sentiment(ids, &mut ctx),
                    (Task::Para, Batch::Pair { a, b, .. }) => self.model.predict_paraphrase(a, b, &mut ctx),
                    (_, Batch::Pair { a, b, .. }) => self.model.predict_similarity(a, b, &mut ctx),
                    _ => unreachable!("loader batches match their task"),
                })?;
                outs.push(o.cast(crate::tensor::DType::F32));
            }
            let activation_bytes = memory::live_bytes().saturating_sub(base);
            let mut it = outs.into_iter().zip(&lists).map(|(output, l)| Some(TaskTerm { output, target: Self::target(&l[i]) }));
            let terms = [it.next().flatten(), it.next().flatten(), it.next().flatten()];
            let loss = composite_loss(terms, &specs)?;
            let value = loss.item();
            scaled_backward(&loss, self.scaler.as_ref())?;
            let joint = self.joint.as_mut().expect("joint optimizer");
            let outcome = unscale_and_step(joint, self.scaler.as_mut());
            self.check_cap()?;
            total += value as f64;
            self.metrics.steps.push(StepRecord { epoch, task: Task::Sst, loss: value, outcome, activation_bytes });
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let peak_bytes = memory::peak_bytes();
        Ok(Task::ALL
            .iter()
            .map(|&task| TaskEpochMetrics { task, epoch, wall_ms, peak_bytes, steps: n, mean_loss: total / n.max(1) as f64 })
            .collect())
    }

    pub fn train_epoch(&mut self, epoch: usize) -> Result<Vec<TaskEpochMetrics>> {
        match self.cfg.loop_kind {
            LoopKind::Sequential => self.train_epoch_sequential(epoch),
            LoopKind::Interleaved => self.train_epoch_interleaved(epoch),
            LoopKind::Composite => self.train_epoch_composite(epoch),
        }
    }

    /// Prepare, train and evaluate one epoch; checkpoint on improvement.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<(EpochRecord, bool)> {
        let d = self.prepare_epoch(epoch)?;
        let tasks = self.train_epoch(epoch)?;
        let scores = evaluate(&self.model, &self.dev)?;
        let improved = self.metrics.best_overall.is_none_or(|b| scores.overall > b);
        if improved {
            self.metrics.best_overall = Some(scores.overall);
            self.metrics.best_epoch = Some(epoch);
            if let Some(path) = &self.cfg.checkpoint {
                save_checkpoint(path, &self.model, scores.overall, epoch)?;
            }
        }
        let rec = EpochRecord { epoch, directive: d.to_string(), tasks, scores };
        self.metrics.epochs.push(rec.clone());
        Ok((rec, improved))
    }
}

fn concat_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    crate::tensor::concat(&[a, b], 1)
}

pub struct FitOutput {
    pub metrics: RunMetrics,
    /// The model with its best-epoch weights restored.
    pub model: MultitaskModel,
    pub ledger: Arc<MemoryLedger>,
}

/// Train for `cfg.epochs`, keeping the weights of the best dev epoch.
pub fn fit(cfg: &TrainConfig, train: &TaskData, dev: &TaskData) -> Result<FitOutput> {
    let ledger = Arc::new(MemoryLedger::new());
    memory::with_ledger(ledger.clone(), || {
        let mut t = Trainer::new(cfg.clone(), train, dev)?;
        let mut best = None;
        for epoch in 0..cfg.epochs {
            let (_, improved) = t.run_epoch(epoch)?;
            if improved {
                best = Some(state_dict(&t.model));
            }
        }
        if let Some(s) = best {
            load_state_dict(&t.model, &s)?;
        }
        let Trainer { metrics, model, .. } = t;
        Ok(FitOutput { metrics, model, ledger: ledger.clone() })
    })
}
