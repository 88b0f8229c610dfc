//! The multitask model: a sentiment backbone, a similarity backbone shared by
//! the paraphrase and STS tasks, a shared comparison-feature projector and one
//! classifier head per task.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterMode, FreezeDirective, InjectionReport};
use crate::encoder::{Encoder, EncoderConfig, TokenBatch};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, BatchNorm1d, Conv1d, ForwardCtx, Init, Linear, Module, Named};
use crate::tensor::{concat, Tensor};

pub const SST_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "sst")]
    Sst,
    #[serde(rename = "para")]
    Para,
    #[serde(rename = "sts")]
    Sts,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sst, Task::Para, Task::Sts];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Sst => "sst",
            Task::Para => "para",
            Task::Sts => "sts",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "yin-yang")]
    YinYang,
    #[serde(rename = "duality-of-man")]
    DualityOfMan,
}

impl Architecture {
    /// Length of the raw comparison feature vector for hidden size `h`.
    pub fn feature_size(self, h: usize) -> usize {
        match self {
            Architecture::YinYang => 4 * h + 1,
            Architecture::DualityOfMan => 2 * h + 1,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "yin-yang" | "yinyang" => Ok(Architecture::YinYang),
            "duality-of-man" | "duality" => Ok(Architecture::DualityOfMan),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClfKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "nonlinear")]
    Nonlinear,
    #[serde(rename = "conv")]
    Conv,
}

impl FromStr for ClfKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(ClfKind::Linear),
            "nonlinear" | "non-linear" => Ok(ClfKind::Nonlinear),
            "conv" => Ok(ClfKind::Conv),
            other => Err(Error::Config(format!("unknown classifier kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub architecture: Architecture,
    pub clf: ClfKind,
    /// Width of the projected comparison features; defaults to the hidden size.
    pub feature_proj: Option<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            adapter: AdapterConfig::none(),
            architecture: Architecture::YinYang,
            clf: ClfKind::Conv,
            feature_proj: None,
            seed,
        }
    }

    pub fn feature_proj_size(&self) -> usize {
        self.feature_proj.unwrap_or(self.encoder.hidden)
    }
}

/// Task classifier stack. `bn` is off for the duality-of-man variant.
pub enum Classifier {
    Linear(Linear),
    Nonlinear {
        l1: Linear,
        bn: Option<BatchNorm1d>,
        l2: Linear,
    },
    Conv {
        conv: Conv1d,
        bn0: Option<BatchNorm1d>,
        l1: Linear,
        bn1: Option<BatchNorm1d>,
        l2: Linear,
    },
}

impl Classifier {
    pub fn new(seed: u64, path: &str, kind: ClfKind, in_dim: usize, hidden: usize, out: usize, bn: bool) -> Result<Self> {
        let mid = (hidden / 2).max(1);
        let bn_of = |c: usize| -> Result<Option<BatchNorm1d>> { if bn { BatchNorm1d::new(c).map(Some) } else { Ok(None) } };
        Ok(match kind {
            ClfKind::Linear => Classifier::Linear(Linear::new(seed, &join(path, "fc"), in_dim, out, Init::FanIn)?),
            ClfKind::Nonlinear => Classifier::Nonlinear {
                l1: Linear::new(seed, &join(path, "fc1"), in_dim, mid, Init::FanIn)?,
                bn: bn_of(mid)?,
                l2: Linear::new(seed, &join(path, "fc2"), mid, out, Init::FanIn)?,
            },
            ClfKind::Conv => {
                if in_dim < 3 {
                    return Err(Error::Config(format!("conv classifier needs input width >= 3, got {in_dim}")));
                }
                Classifier::Conv {
                    conv: Conv1d::new(seed, &join(path, "conv"), 1, 4, 3)?,
                    bn0: bn_of(4)?,
                    l1: Linear::new(seed, &join(path, "fc1"), 4 * (in_dim - 2), mid, Init::FanIn)?,
                    bn1: bn_of(mid)?,
                    l2: Linear::new(seed, &join(path, "fc2"), mid, out, Init::FanIn)?,
                }
            }
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let bn = |m: &Option<BatchNorm1d>, t: Tensor| -> Result<Tensor> {
            match m {
                Some(b) => b.forward(&t, ctx),
                None => Ok(t),
            }
        };
        match self {
            Classifier::Linear(l) => l.forward(x),
            Classifier::Nonlinear { l1, bn: b, l2 } => {
                let h = bn(b, l1.forward(x)?)?.relu();
                l2.forward(&h)
            }
            Classifier::Conv { conv, bn0, l1, bn1, l2 } => {
                let (n, d) = (x.dim(0), x.dim(1));
                let c = conv.forward(&x.reshape(&[n, 1, d])?)?;
                let c = bn(bn0, c)?.reshape(&[n, 4 * (d - 2)])?;
                let h = bn(bn1, l1.forward(&c)?)?.relu();
                l2.forward(&h)
            }
        }
    }
}

impl Module for Classifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        match self {
            Classifier::Linear(l) => l.visit(&join(prefix, "fc"), f),
            Classifier::Nonlinear { l1, bn, l2 } => {
                l1.visit(&join(prefix, "fc1"), f);
                if let Some(b) = bn {
                    b.visit(&join(prefix, "bn1"), f);
                }
                l2.visit(&join(prefix, "fc2"), f);
            }
            Classifier::Conv { conv, bn0, l1, bn1, l2 } => {
                conv.visit(&join(prefix, "conv"), f);
                if let Some(b) = bn0 {
                    b.visit(&join(prefix, "bn0"), f);
                }
                l1.visit(&join(prefix, "fc1"), f);
                if let Some(b) = bn1 {
                    b.visit(&join(prefix, "bn1"), f);
                }
                l2.visit(&join(prefix, "fc2"), f);
            }
        }
    }
}

/// `Linear -> BN -> ReLU -> Linear -> BN`, shared by the paraphrase and STS paths.
pub struct FeatureProjector {
    pub l1: Linear,
    pub bn1: BatchNorm1d,
    pub l2: Linear,
    pub bn2: BatchNorm1d,
}

impl FeatureProjector {
    pub fn new(seed: u64, path: &str, in_dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(seed, &join(path, "fc1"), in_dim, out, Init::FanIn)?,
            bn1: BatchNorm1d::new(out)?,
            l2: Linear::new(seed, &join(path, "fc2"), out, out, Init::FanIn)?,
            bn2: BatchNorm1d::new(out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = self.bn1.forward(&self.l1.forward(x)?, ctx)?.relu();
        self.bn2.forward(&self.l2.forward(&h)?, ctx)
    }
}

impl Module for FeatureProjector {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        self.l1.visit(&join(prefix, "fc1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.l2.visit(&join(prefix, "fc2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }
}

/// Row-wise cosine similarity `[B, H] x [B, H] -> [B, 1]`.
pub fn cosine_similarity(e1: &Tensor, e2: &Tensor) -> Result<Tensor> {
    let dot = e1.mul(e2)?.sum_dim(-1, true)?;
    let n1 = e1.powi(2).sum_dim(-1, true)?.add_scalar(1e-12).sqrt()?;
    let n2 = e2.powi(2).sum_dim(-1, true)?.add_scalar(1e-12).sqrt()?;
    dot.div(&n1.mul(&n2)?)
}

/// Raw comparison features for a pair of embedding batches.
pub fn comparison_features(arch: Architecture, e1: &Tensor, e2: &Tensor) -> Result<Tensor> {
    if e1.shape() != e2.shape() || e1.ndim() != 2 {
        return shape_err("comparison_features", format!("{:?} vs {:?}", e1.shape(), e2.shape()));
    }
    let diff = e1.sub(e2)?.abs();
    let prod = e1.mul(e2)?;
    let cos = cosine_similarity(e1, e2)?;
    match arch {
        Architecture::YinYang => concat(&[e1, e2, &diff, &prod, &cos], 1),
        Architecture::DualityOfMan => concat(&[&diff, &prod, &cos], 1),
    }
}

pub struct MultitaskModel {
    pub cfg: ModelConfig,
    pub bert_sentiment: Encoder,
    pub bert_sim: Encoder,
    pub comparison_features_fcn: FeatureProjector,
    pub sentiment_head: Classifier,
    pub paraphrase_head: Classifier,
    pub similarity_head: Classifier,
    pub injection: InjectionReport,
}

impl MultitaskModel {
    /// Build the model and inject adapters as configured.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let enc = cfg.encoder;
        let h = enc.hidden;
        let seed = cfg.seed;
        let p = cfg.feature_proj_size();
        let bn = cfg.architecture == Architecture::YinYang;
        let f = cfg.architecture.feature_size(h);
        let mut model = Self {
            cfg,
            // Both backbones start from the same weights, as two copies of one
            // pretrained checkpoint would.
            bert_sentiment: Encoder::new(enc, seed)?,
            bert_sim: Encoder::new(enc, seed)?,
            comparison_features_fcn: FeatureProjector::new(seed, "comparison_features_fcn", f, p)?,
            sentiment_head: Classifier::new(seed, "sentiment_head", cfg.clf, h, h, SST_CLASSES, bn)?,
            paraphrase_head: Classifier::new(seed, "paraphrase_head", cfg.clf, p, h, 1, bn)?,
            similarity_head: Classifier::new(seed, "similarity_head", cfg.clf, p, h, 1, bn)?,
            injection: InjectionReport::default(),
        };
        if cfg.adapter.mode != AdapterMode::None {
            model.inject(&cfg.adapter)?;
        }
        Ok(model)
    }

    /// Wrap both backbones. Fails on a second call.
    pub fn inject(&mut self, acfg: &AdapterConfig) -> Result<InjectionReport> {
        if self.bert_sentiment.is_adapted() || self.bert_sim.is_adapted() {
            return Err(Error::Adapter("adapters are already injected".into()));
        }
        let seed = self.cfg.seed;
        let mut report = self.bert_sentiment.inject(acfg, seed ^ 0x5e57, "bert_sentiment")?;
        report.merge(self.bert_sim.inject(acfg, seed ^ 0x5171, "bert_sim")?);
        self.cfg.adapter = *acfg;
        self.injection = report.clone();
        Ok(report)
    }

    /// Apply a freezing directive (`freezeall`, `unfreezeall`, `unfreezetopN`) to both backbones.
    pub fn manage_freezing(&mut self, directive: &str) -> Result<()> {
        self.apply_directive(FreezeDirective::parse(directive)?)
    }

    pub fn apply_directive(&mut self, d: FreezeDirective) -> Result<()> {
        d.validate(self.cfg.encoder.num_layers)?;
        self.bert_sentiment.apply_freeze(d)?;
        self.bert_sim.apply_freeze(d)
    }

    fn embed(&self, enc: &Encoder, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let e = enc.forward(batch, ctx)?;
        ctx.dropout(&e, self.cfg.encoder.dropout_p)
    }

    pub fn predict_sentiment(&self, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let e = self.embed(&self.bert_sentiment, batch, ctx)?;
        self.sentiment_head.forward(&e, ctx)
    }

    /// Pooled similarity-backbone embeddings of both sides of a pair.
    pub fn sim_embeddings(&self, b1: &TokenBatch, b2: &TokenBatch, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        if b1.batch != b2.batch {
            return shape_err("sim_embeddings", format!("{} vs {} pairs", b1.batch, b2.batch));
        }
        Ok((self.embed(&self.bert_sim, b1, ctx)?, self.embed(&self.bert_sim, b2, ctx)?))
    }

    /// Projected comparison features `[B, FEATURE_PROJ_SIZE]` from the similarity backbone.
    pub fn extract_comparison_features(
        &self,
        b1: &TokenBatch,
        b2: &TokenBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let (e1, e2) = self.sim_embeddings(b1, b2, ctx)?;
        let raw = comparison_features(self.cfg.architecture, &e1, &e2)?;
        self.comparison_features_fcn.forward(&raw, ctx)
    }

    /// Paraphrase logit per pair, `[B]`.
    pub fn predict_paraphrase(&self, b1: &TokenBatch, b2: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let f = self.extract_comparison_features(b1, b2, ctx)?;
        let n = b1.batch;
        self.paraphrase_head.forward(&f, ctx)?.reshape(&[n])
    }

    /// Unbounded similarity score per pair, `[B]`.
    pub fn predict_similarity(&self, b1: &TokenBatch, b2: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let f = self.extract_comparison_features(b1, b2, ctx)?;
        let n = b1.batch;
        self.similarity_head.forward(&f, ctx)?.reshape(&[n])
    }

    /// Parameters a task's loss reaches: its backbone path plus its head.
    pub fn task_parameters(&self, task: Task) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |m: &dyn Module, prefix: &str| {
            for (p, t, _) in m.parameters(prefix) {
                out.push((p, t));
            }
        };
        match task {
            Task::Sst => {
                push(&self.bert_sentiment, "bert_sentiment");
                push(&self.sentiment_head, "sentiment_head");
            }
            Task::Para => {
                push(&self.bert_sim, "bert_sim");
                push(&self.comparison_features_fcn, "comparison_features_fcn");
                push(&self.paraphrase_head, "paraphrase_head");
            }
            Task::Sts => {
                push(&self.bert_sim, "bert_sim");
                push(&self.comparison_features_fcn, "comparison_features_fcn");
                push(&self.similarity_head, "similarity_head");
            }
        }
        out
    }

    pub fn zero_grad(&self) {
        for (_, t, _) in self.named_tensors("") {
            t.zero_grad();
        }
    }

    /// Paths of every currently trainable parameter, sorted.
    pub fn trainable_paths(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .parameters("")
            .into_iter()
            .filter(|(_, t, _)| t.requires_grad())
            .map(|(p, _, _)| p)
            .collect();
        v.sort();
        v
    }

    pub fn backbone_trainable(&self) -> u64 {
        self.bert_sentiment.num_trainable() + self.bert_sim.num_trainable()
    }
}

impl Module for MultitaskModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        self.bert_sentiment.visit(&join(prefix, "bert_sentiment"), f);
        self.bert_sim.visit(&join(prefix, "bert_sim"), f);
        self.comparison_features_fcn.visit(&join(prefix, "comparison_features_fcn"), f);
        self.sentiment_head.visit(&join(prefix, "sentiment_head"), f);
        self.paraphrase_head.visit(&join(prefix, "paraphrase_head"), f);
        self.similarity_head.visit(&join(prefix, "similarity_head"), f);
    }
}
