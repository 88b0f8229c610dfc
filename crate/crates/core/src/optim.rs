//! SGD, Adam and Adamax with lazily allocated, ledger-billed state; per-task
//! optimizer sets; learning-rate schedules; and an EMA of model weights.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{MultitaskModel, Task};
use crate::nn::Module;
use crate::tensor::memory::Buffer;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "adam")]
    Adam,
    #[serde(rename = "adamax")]
    Adamax,
}

impl OptimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
            OptimKind::Adamax => "adamax",
        }
    }

    /// Moment slots kept per parameter element.
    pub fn slots(self) -> u64 {
        match self {
            OptimKind::Sgd => 0,
            OptimKind::Adam | OptimKind::Adamax => 2,
        }
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" | "adamw" => Ok(OptimKind::Adam),
            "adamax" => Ok(OptimKind::Adamax),
            "radam" | "sparseadam" => Err(Error::Config(format!("optimizer '{s}' is not supported"))),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Hyper {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

fn c<F: Float>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

/// SGD with coupled L2: `theta -= lr (g + wd theta)`.
pub fn sgd_kernel<F: Float>(theta: &mut [F], g: &[F], h: &Hyper) {
    let (lr, wd) = (c::<F>(h.lr), c::<F>(h.weight_decay));
    for (p, &gi) in theta.iter_mut().zip(g) {
        *p = *p - lr * (gi + wd * *p);
    }
}

/// One Adam step at (already incremented) step count `t`, with decoupled decay.
pub fn adam_kernel<F: Float>(theta: &mut [F], g: &[F], m: &mut [F], v: &mut [F], t: u64, h: &Hyper) {
    let (b1, b2) = (c::<F>(h.beta1), c::<F>(h.beta2));
    let (lr, eps, wd) = (c::<F>(h.lr), c::<F>(h.eps), c::<F>(h.weight_decay));
    let one = F::one();
    let bc1 = one - b1.powi(t as i32);
    let bc2 = one - b2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] = theta[i] - lr * wd * theta[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One Adamax step: infinity-norm second moment, bias correction on `m` only.
pub fn adamax_kernel<F: Float>(theta: &mut [F], g: &[F], m: &mut [F], u: &mut [F], t: u64, h: &Hyper) {
    let (b1, b2) = (c::<F>(h.beta1), c::<F>(h.beta2));
    let (lr, eps, wd) = (c::<F>(h.lr), c::<F>(h.eps), c::<F>(h.weight_decay));
    let one = F::one();
    let step = lr / (one - b1.powi(t as i32));
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        u[i] = (b2 * u[i]).max(g[i].abs());
        theta[i] = theta[i] - lr * wd * theta[i] - step * m[i] / (u[i] + eps);
    }
}

struct Slot {
    m: Buffer,
    v: Buffer,
    t: u64,
}

/// An optimizer over a fixed list of parameters. Only parameters that are
/// trainable and hold a gradient at step time are touched; their state is
/// created on first use.
pub struct Optimizer {
    pub kind: OptimKind,
    pub hyper: Hyper,
    params: Vec<(String, Tensor)>,
    state: HashMap<u64, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, hyper: Hyper, params: Vec<(String, Tensor)>) -> Self {
        Self { kind, hyper, params, state: HashMap::new() }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.hyper.lr
    }

    /// Step count of a parameter's state, if it has any.
    pub fn step_count(&self, t: &Tensor) -> Option<u64> {
        self.state.get(&t.id()).map(|s| s.t)
    }

    pub fn has_state(&self, t: &Tensor) -> bool {
        self.state.contains_key(&t.id())
    }

    /// Bytes of moment state currently held.
    pub fn state_bytes(&self) -> u64 {
        self.state.values().map(|s| s.m.bytes() + s.v.bytes()).sum()
    }

    /// State bytes this optimizer kind would hold for `trainable` elements.
    pub fn planned_state_bytes(kind: OptimKind, trainable: u64) -> u64 {
        kind.slots() * trainable * DType::F32.size_of() as u64
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        let kind = self.kind;
        let h = self.hyper;
        for (_, p) in &self.params {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad() else { continue };
            match kind {
                OptimKind::Sgd => p.with_data_mut(|d| sgd_kernel(d, &g, &h)),
                OptimKind::Adam | OptimKind::Adamax => {
                    let slot = self.state.entry(p.id()).or_insert_with(|| Slot {
                        m: Buffer::zeros(g.len(), DType::F32),
                        v: Buffer::zeros(g.len(), DType::F32),
                        t: 0,
                    });
                    slot.t += 1;
                    let t = slot.t;
                    let (m, v) = (slot.m.as_mut_slice(), slot.v.as_mut_slice());
                    p.with_data_mut(|d| {
                        if kind == OptimKind::Adam {
                            adam_kernel(d, &g, m, v, t, &h)
                        } else {
                            adamax_kernel(d, &g, m, v, t, &h)
                        }
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// `lr0 * gamma^epoch`.
    Multiplicative { gamma: f64 },
    /// Triangular wave from `lo` at the start of each period up to `hi` at its midpoint.
    Cyclical { lo: f64, hi: f64, period: usize },
    /// The triangular wave divided by `factor` for every completed cycle.
    CyclicalDecay { lo: f64, hi: f64, period: usize, factor: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::Multiplicative { gamma } if gamma > 0.0 && gamma <= 1.0 => Ok(()),
            LrSchedule::Multiplicative { gamma } => Err(Error::Config(format!("lr_lambda {gamma} is outside (0, 1]"))),
            LrSchedule::Cyclical { lo, hi, period } | LrSchedule::CyclicalDecay { lo, hi, period, .. } => {
                if lo > hi || period == 0 {
                    Err(Error::Config(format!("cyclical schedule needs lo <= hi and period >= 1, got ({lo}, {hi}, {period})")))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        let tri = |lo: f64, hi: f64, period: usize| {
            let phase = (epoch % period) as f64 / period as f64;
            lo + (hi - lo) * (1.0 - (2.0 * phase - 1.0).abs())
        };
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::Multiplicative { gamma } => lr0 * gamma.powi(epoch as i32),
            LrSchedule::Cyclical { lo, hi, period } => tri(lo, hi, period),
            LrSchedule::CyclicalDecay { lo, hi, period, factor } => {
                tri(lo, hi, period) / factor.powi((epoch / period) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Per-task learning-rate multipliers, indexed sst, para, sts.
    pub multipliers: [f64; 3],
    pub weight_decays: [f64; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            schedule: LrSchedule::Constant,
            multipliers: [1.0; 3],
            weight_decays: [0.0; 3],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.multipliers.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Config("learning-rate multipliers must be positive".into()));
        }
        if self.weight_decays.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        self.schedule.validate()
    }

    pub fn task_lr(&self, task: Task, epoch: usize) -> f64 {
        self.schedule.lr_at(self.lr, epoch) * self.multipliers[task.index()]
    }

    pub fn hyper(&self, task: Task) -> Hyper {
        Hyper {
            lr: self.task_lr(task, 0),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decays[task.index()],
        }
    }
}

/// One optimizer per task, each over its head and backbone path.
pub struct TaskOptimizers {
    pub cfg: OptimConfig,
    pub opts: [Optimizer; 3],
}

impl TaskOptimizers {
    pub fn get(&self, task: Task) -> &Optimizer {
        &self.opts[task.index()]
    }

    pub fn get_mut(&mut self, task: Task) -> &mut Optimizer {
        &mut self.opts[task.index()]
    }

    /// Set every optimizer's learning rate for `epoch`.
    pub fn schedule(&mut self, epoch: usize) {
        for task in Task::ALL {
            let lr = self.cfg.task_lr(task, epoch);
            self.opts[task.index()].set_lr(lr);
        }
    }

    pub fn state_bytes(&self) -> u64 {
        self.opts.iter().map(Optimizer::state_bytes).sum()
    }
}

pub fn build_task_optimizers(model: &MultitaskModel, cfg: &OptimConfig) -> Result<TaskOptimizers> {
    cfg.validate()?;
    let mk = |task: Task| Optimizer::new(cfg.kind, cfg.hyper(task), model.task_parameters(task));
    Ok(TaskOptimizers { cfg: *cfg, opts: [mk(Task::Sst), mk(Task::Para), mk(Task::Sts)] })
}

/// Exponential moving average of a model's parameters.
pub struct Ema {
    pub decay: f32,
    shadow: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Ema {
    pub fn new(model: &dyn Module, decay: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} is outside [0, 1]")));
        }
        let shadow = model
            .parameters("")
            .into_iter()
            .map(|(p, t, _)| (p, t.shape().to_vec(), t.to_vec()))
            .collect();
        Ok(Self { decay, shadow })
    }

    pub fn shadow(&self) -> &[(String, Vec<usize>, Vec<f32>)] {
        &self.shadow
    }

    /// `shadow = d * shadow + (1 - d) * param` for every parameter.
    pub fn update(&mut self, model: &dyn Module) -> Result<()> {
        let params = self.check(model)?;
        let d = self.decay;
        for ((_, _, s), (_, t, _)) in self.shadow.iter_mut().zip(&params) {
            t.with_data(|p| {
                for (si, &pi) in s.iter_mut().zip(p) {
                    *si = d * *si + (1.0 - d) * pi;
                }
            });
        }
        Ok(())
    }

    /// Load the shadow weights into `target`, typically a copy of the live model.
    pub fn apply(&self, target: &dyn Module) -> Result<()> {
        let params = self.check(target)?;
        for ((_, _, s), (_, t, _)) in self.shadow.iter().zip(&params) {
            t.with_data_mut(|d| d.copy_from_slice(s));
        }
        Ok(())
    }

    fn check(&self, model: &dyn Module) -> Result<Vec<(String, Tensor, crate::nn::Role)>> {
        let params = model.parameters("");
        let same = params.len() == self.shadow.len()
            && params.iter().zip(&self.shadow).all(|((p, t, _), (sp, ss, _))| p == sp && t.shape() == ss.as_slice());
        if !same {
            return Err(Error::Shape { op: "ema", msg: "model parameters no longer match the shadow".into() });
        }
        Ok(params)
    }
}
