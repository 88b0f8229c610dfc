//! Training objectives. Each returns a scalar tensor wired into the autograd graph.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::heads::Task;
use crate::tensor::Tensor;

/// Clamp applied to cumulative probabilities in the ordinal loss.
pub const ORDINAL_EPS: f32 = 1e-7;

fn check_len(op: &'static str, t: &Tensor, n: usize) -> Result<()> {
    if t.numel() != n {
        return shape_err(op, format!("prediction has {} elements, targets {}", t.numel(), n));
    }
    Ok(())
}

fn one_hot(op: &'static str, labels: &[usize], classes: usize) -> Result<Vec<f32>> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelRange { label: l, classes });
        }
        v[i * classes + l] = 1.0;
    }
    if labels.is_empty() {
        return shape_err(op, "empty batch");
    }
    Ok(v)
}

fn logits_2d(op: &'static str, logits: &Tensor, n: usize) -> Result<usize> {
    if logits.ndim() != 2 || logits.dim(0) != n {
        return shape_err(op, format!("logits {:?} for {} labels", logits.shape(), n));
    }
    Ok(logits.dim(1))
}

/// Mean cross entropy of `[N, C]` logits against class indices.
pub fn ce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let c = logits_2d("ce", logits, labels.len())?;
    let oh = Tensor::new(one_hot("ce", labels, c)?, &[labels.len(), c])?;
    let picked = logits.log_softmax()?.mul(&oh)?.sum();
    Ok(picked.mul_scalar(-1.0 / labels.len() as f32))
}

/// Mean binary cross entropy on logits, computed as `softplus(x) - y x`.
pub fn bce(logits: &Tensor, labels: &[f32]) -> Result<Tensor> {
    check_len("bce", logits, labels.len())?;
    if labels.is_empty() {
        return shape_err("bce", "empty batch");
    }
    let y = Tensor::new(labels.to_vec(), logits.shape())?;
    Ok(logits.softplus().sub(&logits.mul(&y)?)?.mean())
}

/// Batch-mean KL divergence `sum t (log t - log p) / N`, with `0 log 0 = 0`.
pub fn kl_div(log_probs: &Tensor, target: &[f32]) -> Result<Tensor> {
    check_len("kl_div", log_probs, target.len())?;
    if log_probs.ndim() == 0 || log_probs.dim(0) == 0 {
        return shape_err("kl_div", "empty batch");
    }
    let n = log_probs.dim(0);
    let entropy: f64 = target
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t as f64 * (t as f64).ln())
        .sum();
    let t = Tensor::new(target.to_vec(), log_probs.shape())?;
    let cross = log_probs.mul(&t)?.sum();
    Ok(cross.neg().add_scalar(entropy as f32).mul_scalar(1.0 / n as f32))
}

pub fn mse(preds: &Tensor, targets: &[f32]) -> Result<Tensor> {
    check_len("mse", preds, targets.len())?;
    if targets.is_empty() {
        return shape_err("mse", "empty batch");
    }
    let t = Tensor::new(targets.to_vec(), preds.shape())?;
    Ok(preds.sub(&t)?.powi(2).mean())
}

fn sum_sq_dev(v: &[f32]) -> f64 {
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    v.iter().map(|&x| (x as f64 - m).powi(2)).sum()
}

/// `1 - r` for the sample Pearson correlation `r`. Constant inputs are an error.
pub fn pearson_loss(preds: &Tensor, targets: &[f32]) -> Result<Tensor> {
    check_len("pearson_loss", preds, targets.len())?;
    if targets.len() < 2 {
        return shape_err("pearson_loss", "needs at least two samples");
    }
    if sum_sq_dev(targets) == 0.0 {
        return Err(Error::ZeroVariance("targets"));
    }
    if preds.with_data(sum_sq_dev) == 0.0 {
        return Err(Error::ZeroVariance("predictions"));
    }
    let n = targets.len();
    let p = preds.reshape(&[n])?;
    let tm = targets.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let vy: Vec<f32> = targets.iter().map(|&x| (x as f64 - tm) as f32).collect();
    let vy_norm = vy.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let vy = Tensor::new(vy, &[n])?;
    let vx = p.sub(&p.mean())?;
    let cov = vx.mul(&vy)?.sum();
    let vx_norm = vx.powi(2).sum().sqrt()?;
    let r = cov.div(&vx_norm)?.mul_scalar(1.0 / vy_norm as f32);
    Ok(r.neg().add_scalar(1.0))
}

/// Mean `log cosh(p - y)` in the overflow-safe form `|r| + softplus(-2|r|) - ln 2`.
pub fn log_cosh(preds: &Tensor, targets: &[f32]) -> Result<Tensor> {
    check_len("log_cosh", preds, targets.len())?;
    if targets.is_empty() {
        return shape_err("log_cosh", "empty batch");
    }
    let t = Tensor::new(targets.to_vec(), preds.shape())?;
    let a = preds.sub(&t)?.abs();
    let per = a.add(&a.mul_scalar(-2.0).softplus())?.add_scalar(-std::f32::consts::LN_2);
    Ok(per.mean())
}

/// Multi-label BCE against the one-hot label plus MSE between the softmax-expected
/// score over the grid `1..=C` and the raw label index.
pub fn mixed_bce_mse(logits: &Tensor, labels: &[usize], lambda_bce: f32, lambda_mse: f32) -> Result<Tensor> {
    let c = logits_2d("mixed_bce_mse", logits, labels.len())?;
    let oh = one_hot("mixed_bce_mse", labels, c)?;
    let bce_part = bce(logits, &oh)?;
    let grid = Tensor::new((1..=c).map(|s| s as f32).collect(), &[c, 1])?;
    let expected = logits.softmax()?.matmul(&grid)?.reshape(&[labels.len()])?;
    let raw: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
    let mse_part = mse(&expected, &raw)?;
    bce_part.mul_scalar(lambda_bce).add(&mse_part.mul_scalar(lambda_mse))
}

fn tri(c: usize, upper: bool) -> Result<Tensor> {
    // [l, j] = 1 when l <= j (cumulative) or l > j (tail).
    let v = (0..c * c)
        .map(|i| {
            let (l, j) = (i / c, i % c);
            if (l <= j) == upper {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(v, &[c, c])
}

/// Cumulative class probabilities, `[N, K]` row-major.
pub fn ordinal_cumulative(logits: &Tensor) -> Result<Vec<f32>> {
    if logits.ndim() != 2 {
        return shape_err("ordinal_cumulative", format!("logits {:?}", logits.shape()));
    }
    let c = logits.dim(1);
    crate::tensor::no_grad(|| Ok(logits.softmax()?.matmul(&tri(c, true)?)?.to_vec()))
}

/// Sum over instances of binary cross entropy between the one-hot label and the
/// cumulative softmax. `1 - cum` is computed as the tail sum so the top class
/// hits the clamp exactly rather than through cancellation.
pub fn ordinal_ce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let c = logits_2d("ordinal_ce", logits, labels.len())?;
    let oh_v = one_hot("ordinal_ce", labels, c)?;
    let inv_v: Vec<f32> = oh_v.iter().map(|&x| 1.0 - x).collect();
    let shape = [labels.len(), c];
    let p = logits.softmax()?;
    let (lo, hi) = (ORDINAL_EPS, 1.0 - ORDINAL_EPS);
    let cum = p.matmul(&tri(c, true)?)?.clamp(lo, hi);
    let tail = p.matmul(&tri(c, false)?)?.clamp(lo, hi);
    let pos = cum.log()?.mul(&Tensor::new(oh_v, &shape)?)?;
    let neg = tail.log()?.mul(&Tensor::new(inv_v, &shape)?)?;
    Ok(pos.add(&neg)?.sum().neg())
}

/// Which label value marks a similar pair in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ContrastiveConvention {
    /// `y = 0` pulls together, `y = 1` pushes apart past the margin.
    #[default]
    AsWritten,
    /// `y = 1` pulls together.
    Standard,
}

/// Sum over pairs of `(1-y) d^2 / 2 + y max(0, m - d)^2 / 2` on Euclidean distances.
pub fn contrastive(
    e1: &Tensor,
    e2: &Tensor,
    labels: &[f32],
    margin: f32,
    convention: ContrastiveConvention,
) -> Result<Tensor> {
    if e1.shape() != e2.shape() || e1.ndim() != 2 || e1.dim(0) != labels.len() {
        return shape_err("contrastive", format!("{:?} vs {:?} for {} labels", e1.shape(), e2.shape(), labels.len()));
    }
    if !(margin > 0.0) {
        return Err(Error::Config(format!("contrastive margin must be positive, got {margin}")));
    }
    let n = labels.len();
    let y: Vec<f32> = match convention {
        ContrastiveConvention::AsWritten => labels.to_vec(),
        ContrastiveConvention::Standard => labels.iter().map(|&l| 1.0 - l).collect(),
    };
    let pull = Tensor::new(y.iter().map(|&v| 0.5 * (1.0 - v)).collect(), &[n])?;
    let push = Tensor::new(y.iter().map(|&v| 0.5 * v).collect(), &[n])?;
    let d2 = e1.sub(e2)?.powi(2).sum_dim(-1, false)?;
    let d = d2.add_scalar(1e-12).sqrt()?;
    let hinge = d.neg().add_scalar(margin).relu().powi(2);
    Ok(d2.mul(&pull)?.add(&hinge.mul(&push)?)?.sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "bce")]
    Bce,
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "pearson")]
    Pearson,
    #[serde(rename = "logcosh")]
    LogCosh,
    /// BCE + MSE on class logits, or MSE + Pearson on scores.
    #[serde(rename = "mixed")]
    Mixed,
    #[serde(rename = "ordinal_ce")]
    OrdinalCe,
    #[serde(rename = "contrastive")]
    Contrastive,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Bce => "bce",
            LossKind::Kl => "kl",
            LossKind::Mse => "mse",
            LossKind::Pearson => "pearson",
            LossKind::LogCosh => "logcosh",
            LossKind::Mixed => "mixed",
            LossKind::OrdinalCe => "ordinal_ce",
            LossKind::Contrastive => "contrastive",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ce" | "cross_entropy" => LossKind::Ce,
            "bce" => LossKind::Bce,
            "kl" | "kl_div" => LossKind::Kl,
            "mse" => LossKind::Mse,
            "pearson" => LossKind::Pearson,
            "logcosh" | "log_cosh" => LossKind::LogCosh,
            "mixed" | "mixed_bce_mse" | "mixed_mse_pearson" => LossKind::Mixed,
            "ordinal_ce" | "ordinal" => LossKind::OrdinalCe,
            "contrastive" => LossKind::Contrastive,
            other => return Err(Error::Config(format!("unknown loss '{other}'"))),
        })
    }
}

/// Targets for one task batch.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Classes(&'a [usize]),
    Values(&'a [f32]),
}

impl Target<'_> {
    pub fn len(&self) -> usize {
        match self {
            Target::Classes(c) => c.len(),
            Target::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn classes(&self, op: &'static str) -> Result<Vec<usize>> {
        match self {
            Target::Classes(c) => Ok(c.to_vec()),
            Target::Values(v) => v
                .iter()
                .map(|&x| {
                    if x >= 0.0 && x.fract() == 0.0 {
                        Ok(x as usize)
                    } else {
                        Err(Error::Config(format!("{op} needs integer class targets, got {x}")))
                    }
                })
                .collect(),
        }
    }

    fn values(&self) -> Vec<f32> {
        match self {
            Target::Classes(c) => c.iter().map(|&x| x as f32).collect(),
            Target::Values(v) => v.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub task: Task,
    pub kind: LossKind,
    pub mix_weights: (f32, f32),
    pub margin: f32,
    pub convention: ContrastiveConvention,
}

impl LossSpec {
    pub fn new(task: Task, kind: LossKind) -> Self {
        let mix_weights = match task {
            Task::Sts => (1.0, 1.0),
            _ => (1.0, 0.1),
        };
        Self {
            task,
            kind,
            mix_weights,
            margin: 1.0,
            convention: ContrastiveConvention::AsWritten,
        }
    }

    /// CE for SST, BCE for paraphrase, Pearson for STS.
    pub fn default_for(task: Task) -> Self {
        let kind = match task {
            Task::Sst => LossKind::Ce,
            Task::Para => LossKind::Bce,
            Task::Sts => LossKind::Pearson,
        };
        Self::new(task, kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mix_weights.0 < 0.0 || self.mix_weights.1 < 0.0 {
            return Err(Error::Config("mix weights must be non-negative".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("contrastive margin must be positive".into()));
        }
        Ok(())
    }

    /// Loss of a head output against its targets. Contrastive needs embeddings,
    /// see [`contrastive`].
    pub fn apply(&self, output: &Tensor, target: Target<'_>) -> Result<Tensor> {
        self.validate()?;
        let (w0, w1) = self.mix_weights;
        match self.kind {
            LossKind::Ce => ce(output, &target.classes("ce")?),
            LossKind::Bce => bce(output, &target.values()),
            LossKind::Kl => {
                let labels = target.classes("kl")?;
                let c = logits_2d("kl", output, labels.len())?;
                kl_div(&output.log_softmax()?, &one_hot("kl", &labels, c)?)
            }
            LossKind::Mse => mse(output, &target.values()),
            LossKind::Pearson => pearson_loss(output, &target.values()),
            LossKind::LogCosh => log_cosh(output, &target.values()),
            LossKind::Mixed if output.ndim() == 2 => mixed_bce_mse(output, &target.classes("mixed")?, w0, w1),
            LossKind::Mixed => {
                let v = target.values();
                mse(output, &v)?.mul_scalar(w0).add(&pearson_loss(output, &v)?.mul_scalar(w1))
            }
            LossKind::OrdinalCe => ordinal_ce(output, &target.classes("ordinal_ce")?),
            LossKind::Contrastive => Err(Error::Config(
                "contrastive loss is computed on pair embeddings, not head outputs".into(),
            )),
        }
    }
}

/// One task's head output and targets for the composite objective.
pub struct TaskTerm<'a> {
    pub output: Tensor,
    pub target: Target<'a>,
}

/// Unweighted sum of the three task losses. Every task must be present.
pub fn composite_loss(terms: [Option<TaskTerm<'_>>; 3], specs: &[LossSpec; 3]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (i, term) in terms.iter().enumerate() {
        let task = Task::ALL[i];
        let term = term
            .as_ref()
            .ok_or_else(|| Error::Config(format!("composite loss is missing the {task} batch")))?;
        let l = specs[i].apply(&term.output, term.target)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    Ok(total.expect("three terms"))
}
