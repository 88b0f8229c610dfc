//! LoRA / DoRA adapters, injection modes and the layer-freezing policy.
//!
//! A wrapped [`Linear`] keeps its original weight `W0` (`[d, k]`, frozen) and
//! gains `A` (`[r, k]`, Gaussian) and `B` (`[d, r]`, zeros). DoRA adds a
//! magnitude vector `m` (`[k]`) initialized to the column norms of `W0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, normal_values, Linear, Named, Role};
use crate::tensor::Tensor;

/// Std of the Gaussian used for `A`.
pub const LORA_A_STD: f32 = 0.02;
/// Added to squared column norms before the square root in DoRA.
pub const DORA_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "attn-only")]
    AttnOnly,
    #[serde(rename = "attn")]
    Attn,
    #[serde(rename = "all-lin-only")]
    AllLinOnly,
    #[serde(rename = "all-lin")]
    AllLin,
}

impl AdapterMode {
    pub const ALL: [AdapterMode; 5] = [
        AdapterMode::None,
        AdapterMode::AttnOnly,
        AdapterMode::Attn,
        AdapterMode::AllLinOnly,
        AdapterMode::AllLin,
    ];

    /// `*-only` modes freeze everything in the backbone except adapter factors.
    pub fn is_only(self) -> bool {
        matches!(self, AdapterMode::AttnOnly | AdapterMode::AllLinOnly)
    }

    pub fn wraps(self, kind: LinearKind) -> bool {
        match self {
            AdapterMode::None => false,
            AdapterMode::AttnOnly | AdapterMode::Attn => kind == LinearKind::Qkv,
            AdapterMode::AllLinOnly | AdapterMode::AllLin => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::None => "none",
            AdapterMode::AttnOnly => "attn-only",
            AdapterMode::Attn => "attn",
            AdapterMode::AllLinOnly => "all-lin-only",
            AdapterMode::AllLin => "all-lin",
        }
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "none" => Ok(AdapterMode::None),
            "attn-only" => Ok(AdapterMode::AttnOnly),
            "attn" => Ok(AdapterMode::Attn),
            "all-lin-only" => Ok(AdapterMode::AllLinOnly),
            "all-lin" => Ok(AdapterMode::AllLin),
            other => Err(Error::Adapter(format!("unknown adapter mode '{other}'"))),
        }
    }
}

/// Which backbone linear a layer is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinearKind {
    /// Query, key or value projection.
    Qkv,
    AttnOut,
    Intermediate,
    Output,
    Pooler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub mode: AdapterMode,
    pub use_dora: bool,
    alpha: usize,
}

impl AdapterConfig {
    /// Alpha is pinned to the rank, so the `alpha / r` scale is always 1.
    pub fn new(rank: usize, mode: AdapterMode, use_dora: bool) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Adapter("rank must be at least 1".into()));
        }
        if use_dora && mode == AdapterMode::None {
            return Err(Error::Adapter("DoRA requires an adapter mode other than none".into()));
        }
        Ok(Self { rank, mode, use_dora, alpha: rank })
    }

    pub fn none() -> Self {
        Self { rank: 1, mode: AdapterMode::None, use_dora: false, alpha: 1 }
    }

    pub fn alpha(&self) -> usize {
        self.alpha
    }

    pub fn scale(&self) -> f32 {
        self.alpha as f32 / self.rank as f32
    }
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterKind {
    Lora,
    Dora,
}

pub struct Adapter {
    pub kind: AdapterKind,
    pub a: Tensor,
    pub b: Tensor,
    pub m: Option<Tensor>,
    pub scale: f32,
}

/// Euclidean norm of each column of a `[d, k]` matrix, in f64.
pub fn column_norms(w: &[f32], d: usize, k: usize) -> Vec<f32> {
    (0..k)
        .map(|j| (0..d).map(|i| (w[i * k + j] as f64).powi(2)).sum::<f64>().sqrt() as f32)
        .collect()
}

impl Adapter {
    pub fn new(seed: u64, path: &str, base: &Linear, cfg: &AdapterConfig) -> Result<Self> {
        let (d, k, r) = (base.out_dim(), base.in_dim(), cfg.rank);
        let a = Tensor::param(normal_values(seed, &join(path, "lora_A"), r * k, LORA_A_STD), &[r, k])?;
        let b = Tensor::param(vec![0.0; d * r], &[d, r])?;
        let m = if cfg.use_dora {
            let norms = base.weight.with_data(|w| column_norms(w, d, k));
            Some(Tensor::param(norms, &[k])?)
        } else {
            None
        };
        Ok(Self {
            kind: if cfg.use_dora { AdapterKind::Dora } else { AdapterKind::Lora },
            a,
            b,
            m,
            scale: cfg.scale(),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.dim(0)
    }

    /// `B A` (times the scale), shape `[d, k]`.
    pub fn delta_weight(&self) -> Result<Tensor> {
        let ba = self.b.matmul(&self.a)?;
        Ok(if self.scale == 1.0 { ba } else { ba.mul_scalar(self.scale) })
    }

    /// The dense weight the adapted layer applies, `[d, k]`.
    pub fn effective_weight(&self, w0: &Tensor) -> Result<Tensor> {
        let v = w0.add(&self.delta_weight()?)?;
        match &self.m {
            None => Ok(v),
            Some(m) => v.mul(&m.div(&Self::col_norm(&v)?)?),
        }
    }

    fn col_norm(v: &Tensor) -> Result<Tensor> {
        v.powi(2).sum_dim(0, false)?.add_scalar(DORA_EPS).sqrt()
    }

    pub fn forward(&self, x: &Tensor, w0: &Tensor, bias: &Tensor) -> Result<Tensor> {
        match &self.m {
            None => {
                let base = x.matmul_nt(w0)?.add(bias)?;
                let mut delta = x.matmul_nt(&self.a)?.matmul_nt(&self.b)?;
                if self.scale != 1.0 {
                    delta = delta.mul_scalar(self.scale);
                }
                base.add(&delta)
            }
            Some(m) => {
                // x W'^T with W' = V diag(m / |V|_c) equals (x * m / |V|_c) V^T.
                let v = w0.add(&self.delta_weight()?)?;
                let s = m.div(&Self::col_norm(&v)?)?;
                x.mul(&s)?.matmul_nt(&v)?.add(bias)
            }
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        f(Named { path: join(prefix, "lora_A"), tensor: &self.a, role: Role::AdapterA });
        f(Named { path: join(prefix, "lora_B"), tensor: &self.b, role: Role::AdapterB });
        if let Some(m) = &self.m {
            f(Named { path: join(prefix, "dora_m"), tensor: m, role: Role::AdapterM });
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.a.numel() + self.b.numel() + self.m.as_ref().map_or(0, |m| m.numel())
    }
}

/// One wrapped layer in an injection report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedLayer {
    pub path: String,
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub layers: Vec<InjectedLayer>,
    /// Trainable backbone parameters once every layer is unlocked.
    pub trainable_backbone: u64,
    pub total_backbone: u64,
}

impl InjectionReport {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn adapter_parameters(&self) -> u64 {
        self.layers.iter().map(|l| l.trainable as u64).sum()
    }

    pub fn merge(&mut self, other: InjectionReport) {
        self.layers.extend(other.layers);
        self.trainable_backbone += other.trainable_backbone;
        self.total_backbone += other.total_backbone;
    }

    /// One line per wrapped layer: `path d k r trainable`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("path\td\tk\tr\ttrainable\n");
        for l in &self.layers {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", l.path, l.d, l.k, l.r, l.trainable));
        }
        s.push_str(&format!(
            "# trainable_backbone={} total_backbone={}\n",
            self.trainable_backbone, self.total_backbone
        ));
        s
    }
}

/// Wrap one linear layer. Fails if it is already adapted.
pub fn wrap_linear(seed: u64, path: &str, lin: &mut Linear, cfg: &AdapterConfig) -> Result<InjectedLayer> {
    if lin.adapter.is_some() {
        return Err(Error::Adapter(format!("{path} already carries an adapter")));
    }
    let adapter = Adapter::new(seed, path, lin, cfg)?;
    let layer = InjectedLayer {
        path: path.to_string(),
        d: lin.out_dim(),
        k: lin.in_dim(),
        r: cfg.rank,
        trainable: adapter.num_parameters(),
    };
    lin.adapter = Some(adapter);
    Ok(layer)
}

/// Is a backbone tensor trainable under `mode`, ignoring layer locking?
pub fn policy_trainable(mode: AdapterMode, role: Role, wrapped: bool) -> bool {
    match role {
        Role::Buffer => false,
        Role::AdapterA | Role::AdapterB | Role::AdapterM => true,
        Role::LinearWeight if wrapped => false,
        _ => !mode.is_only(),
    }
}

/// Layer-locking directive for a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeDirective {
    FreezeAll,
    UnfreezeAll,
    /// Last `n` transformer layers plus everything after them (the pooler).
    UnfreezeTop(usize),
}

impl FreezeDirective {
    pub fn parse(s: &str) -> Result<Self> {
        let spec = s.trim().to_ascii_lowercase();
        match spec.as_str() {
            "freezeall" => Ok(FreezeDirective::FreezeAll),
            "unfreezeall" => Ok(FreezeDirective::UnfreezeAll),
            _ => spec
                .strip_prefix("unfreezetop")
                .and_then(|n| n.parse::<usize>().ok())
                .map(FreezeDirective::UnfreezeTop)
                .ok_or_else(|| Error::Freezing(s.to_string())),
        }
    }

    pub fn validate(self, num_layers: usize) -> Result<Self> {
        match self {
            FreezeDirective::UnfreezeTop(n) if n > num_layers => Err(Error::Freezing(format!(
                "unfreezetop{n} exceeds the {num_layers} available layers"
            ))),
            d => Ok(d),
        }
    }
}

impl fmt::Display for FreezeDirective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezeDirective::FreezeAll => f.write_str("freezeall"),
            FreezeDirective::UnfreezeAll => f.write_str("unfreezeall"),
            FreezeDirective::UnfreezeTop(n) => write!(f, "unfreezetop{n}"),
        }
    }
}

/// Where a backbone tensor sits, for layer locking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Embeddings,
    Layer(usize),
    Pooler,
}

impl Site {
    pub fn unlocked(self, directive: FreezeDirective, num_layers: usize) -> bool {
        match directive {
            FreezeDirective::FreezeAll => false,
            FreezeDirective::UnfreezeAll => true,
            FreezeDirective::UnfreezeTop(n) => match self {
                Site::Embeddings => false,
                Site::Layer(i) => i + n >= num_layers,
                Site::Pooler => true,
            },
        }
    }
}
