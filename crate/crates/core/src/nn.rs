//! Layer building blocks and the named-parameter visitor shared by every model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::Adapter;
use crate::error::Result;
use crate::tensor::Tensor;

/// What a named tensor is, for freezing policy and counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    LinearWeight,
    LinearBias,
    AdapterA,
    AdapterB,
    AdapterM,
    Norm,
    Embedding,
    Conv,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

impl Role {
    pub fn is_adapter(self) -> bool {
        matches!(self, Role::AdapterA | Role::AdapterB | Role::AdapterM)
    }
}

pub struct Named<'a> {
    pub path: String,
    pub tensor: &'a Tensor,
    pub role: Role,
}

pub trait Module {
    /// Call `f` for every tensor owned by this module, parameters and buffers.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>));

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor, Role)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n| out.push((n.path, n.tensor.clone(), n.role)));
        out
    }

    /// Parameters only (buffers excluded).
    fn parameters(&self, prefix: &str) -> Vec<(String, Tensor, Role)> {
        let mut all = self.named_tensors(prefix);
        all.retain(|(_, _, r)| *r != Role::Buffer);
        all
    }

    fn num_parameters(&self) -> u64 {
        self.parameters("").iter().map(|(_, t, _)| t.numel() as u64).sum()
    }

    fn num_trainable(&self) -> u64 {
        self.parameters("")
            .iter()
            .filter(|(_, t, _)| t.requires_grad())
            .map(|(_, t, _)| t.numel() as u64)
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// FNV-1a, used to derive stable per-path seeds and vocabulary buckets.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for initializing the tensor at `path`.
pub fn init_rng(seed: u64, path: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(path.as_bytes()))
}

pub fn normal_values(seed: u64, path: &str, n: usize, std: f32) -> Vec<f32> {
    let mut rng = init_rng(seed, path);
    let dist = Normal::new(0.0f32, std).expect("valid std");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

fn uniform_values(seed: u64, path: &str, n: usize, bound: f32) -> Vec<f32> {
    let mut rng = init_rng(seed, path);
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// How a freshly built layer's weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, std), bias zero.
    Normal(f32),
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    FanIn,
}

/// Runtime switches for one forward pass.
pub struct ForwardCtx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dropout(&mut self, x: &Tensor, p: f32) -> Result<Tensor> {
        if !self.train || p == 0.0 {
            return Ok(x.clone());
        }
        x.dropout(p, &mut self.rng)
    }
}

/// Affine map `y = x W^T + b` with `W` stored `[out, in]`, optionally adapted.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub adapter: Option<Adapter>,
}

impl Linear {
    pub fn new(seed: u64, path: &str, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let wpath = join(path, "weight");
        let bpath = join(path, "bias");
        let (w, b) = match init {
            Init::Normal(std) => (normal_values(seed, &wpath, in_dim * out_dim, std), vec![0.0; out_dim]),
            Init::FanIn => {
                let bound = 1.0 / (in_dim as f32).sqrt();
                (
                    uniform_values(seed, &wpath, in_dim * out_dim, bound),
                    uniform_values(seed, &bpath, out_dim, bound),
                )
            }
        };
        Ok(Self {
            weight: Tensor::param(w, &[out_dim, in_dim])?,
            bias: Tensor::param(b, &[out_dim])?,
            adapter: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.adapter {
            None => x.matmul_nt(&self.weight)?.add(&self.bias),
            Some(a) => a.forward(x, &self.weight, &self.bias),
        }
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        f(Named { path: join(prefix, "weight"), tensor: &self.weight, role: Role::LinearWeight });
        f(Named { path: join(prefix, "bias"), tensor: &self.bias, role: Role::LinearBias });
        if let Some(a) = &self.adapter {
            a.visit(prefix, f);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::param(vec![1.0; dim], &[dim])?,
            beta: Tensor::param(vec![0.0; dim], &[dim])?,
            eps: 1e-12,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        f(Named { path: join(prefix, "weight"), tensor: &self.gamma, role: Role::Norm });
        f(Named { path: join(prefix, "bias"), tensor: &self.beta, role: Role::Norm });
    }
}

/// Batch norm over `[N, C]` or `[N, C, L]`. Running statistics stay full precision.
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::param(vec![1.0; channels], &[channels])?,
            beta: Tensor::param(vec![0.0; channels], &[channels])?,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        x.batch_norm(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            ctx.train,
            self.momentum,
            self.eps,
        )
    }
}

impl Module for BatchNorm1d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        f(Named { path: join(prefix, "weight"), tensor: &self.gamma, role: Role::Norm });
        f(Named { path: join(prefix, "bias"), tensor: &self.beta, role: Role::Norm });
        f(Named { path: join(prefix, "running_mean"), tensor: &self.running_mean, role: Role::Buffer });
        f(Named { path: join(prefix, "running_var"), tensor: &self.running_var, role: Role::Buffer });
    }
}

pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1d {
    pub fn new(seed: u64, path: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel) as f32).sqrt();
        Ok(Self {
            weight: Tensor::param(
                uniform_values(seed, &join(path, "weight"), out_ch * in_ch * kernel, bound),
                &[out_ch, in_ch, kernel],
            )?,
            bias: Tensor::param(uniform_values(seed, &join(path, "bias"), out_ch, bound), &[out_ch])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv1d(&self.weight, Some(&self.bias))
    }
}

impl Module for Conv1d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        f(Named { path: join(prefix, "weight"), tensor: &self.weight, role: Role::Conv });
        f(Named { path: join(prefix, "bias"), tensor: &self.bias, role: Role::Conv });
    }
}

pub struct Embedding {
    pub weight: Tensor,
}

impl Embedding {
    pub fn new(seed: u64, path: &str, num: usize, dim: usize, std: f32) -> Result<Self> {
        Ok(Self {
            weight: Tensor::param(normal_values(seed, &join(path, "weight"), num * dim, std), &[num, dim])?,
        })
    }

    pub fn forward(&self, ids: &[usize], shape: &[usize]) -> Result<Tensor> {
        self.weight.embedding(ids, shape)
    }
}

impl Module for Embedding {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        f(Named { path: join(prefix, "weight"), tensor: &self.weight, role: Role::Embedding });
    }
}

/// Resident bytes of a module's parameters as billed by the ledger.
pub fn parameter_bytes(m: &dyn Module) -> u64 {
    m.parameters("").iter().map(|(_, t, _)| t.data_bytes()).sum()
}

/// Snapshot of every named tensor (parameters and buffers).
pub fn state_dict(m: &dyn Module) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    m.named_tensors("").into_iter().map(|(p, t, _)| (p, t.shape().to_vec(), t.to_vec())).collect()
}

/// Overwrite `m`'s tensors from a snapshot. Paths and shapes must match exactly.
pub fn load_state_dict(m: &dyn Module, state: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let named = m.named_tensors("");
    if named.len() != state.len() {
        return Err(crate::Error::Shape {
            op: "load_state_dict",
            msg: format!("model has {} tensors, state has {}", named.len(), state.len()),
        });
    }
    for ((path, t, _), (spath, shape, values)) in named.iter().zip(state) {
        if path != spath || t.shape() != shape.as_slice() {
            return Err(crate::Error::Shape {
                op: "load_state_dict",
                msg: format!("{path} {:?} does not match {spath} {:?}", t.shape(), shape),
            });
        }
        t.with_data_mut(|d| d.copy_from_slice(values));
    }
    Ok(())
}
