//! A small BERT-style encoder: learned token and position embeddings, a stack
//! of post-norm self-attention layers and a tanh pooler over the first token.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    policy_trainable, wrap_linear, AdapterConfig, AdapterMode, FreezeDirective, InjectedLayer, InjectionReport,
    LinearKind, Site,
};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Embedding, ForwardCtx, Init, LayerNorm, Linear, Module, Named, Role};
use crate::tensor::{DType, Tensor};

/// Std of the Gaussian used for every backbone linear and embedding table.
pub const INIT_STD: f32 = 0.02;
/// Additive attention bias for masked keys.
pub const MASK_BIAS: f32 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_p: f32,
}

/// Which parameters [`EncoderConfig::count_parameters`] counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    /// Query, key and value projections (weights and biases).
    AttnLinears,
    /// Attention-output, intermediate and output projections of every layer.
    OtherLinears,
}

impl EncoderConfig {
    /// The 12-layer, 768-wide configuration (counting only; never trained here).
    pub fn bert_base() -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            num_heads: 12,
            ff_dim: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            dropout_p: 0.3,
        }
    }

    /// Desk-scale default: 2 layers, width 32.
    pub fn desk() -> Self {
        Self {
            num_layers: 2,
            hidden: 32,
            num_heads: 2,
            ff_dim: 64,
            vocab_size: 4096,
            max_seq_len: 32,
            dropout_p: 0.0,
        }
    }

    /// Linear-weight init std. Equals `INIT_STD` at hidden size 768 and scales
    /// as `1/sqrt(hidden)` so narrow desk models keep the same activation scale.
    pub fn init_std(&self) -> f32 {
        INIT_STD * (768.0 / self.hidden as f32).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.num_layers, self.hidden, self.num_heads, self.ff_dim, self.vocab_size, self.max_seq_len];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("encoder dims must all be at least 1".into()));
        }
        if self.hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Every linear in the backbone as `(relative path, kind, in, out)`, in order.
    pub fn linear_layout(&self) -> Vec<(String, LinearKind, usize, usize)> {
        let (h, f) = (self.hidden, self.ff_dim);
        let mut out = Vec::new();
        for i in 0..self.num_layers {
            let p = format!("layer.{i}");
            for name in ["query", "key", "value"] {
                out.push((format!("{p}.attention.{name}"), LinearKind::Qkv, h, h));
            }
            out.push((format!("{p}.attention.output.dense"), LinearKind::AttnOut, h, h));
            out.push((format!("{p}.intermediate.dense"), LinearKind::Intermediate, h, f));
            out.push((format!("{p}.output.dense"), LinearKind::Output, f, h));
        }
        out.push(("pooler.dense".into(), LinearKind::Pooler, h, h));
        out
    }

    /// Closed-form parameter count; needs no allocation.
    pub fn count_parameters(&self, filter: ParamFilter) -> u64 {
        let lin = |i: usize, o: usize| (i * o + o) as u64;
        let layout = self.linear_layout();
        match filter {
            ParamFilter::AttnLinears => layout
                .iter()
                .filter(|l| l.1 == LinearKind::Qkv)
                .map(|l| lin(l.2, l.3))
                .sum(),
            ParamFilter::OtherLinears => layout
                .iter()
                .filter(|l| matches!(l.1, LinearKind::AttnOut | LinearKind::Intermediate | LinearKind::Output))
                .map(|l| lin(l.2, l.3))
                .sum(),
            ParamFilter::All => {
                let h = self.hidden as u64;
                let emb = (self.vocab_size + self.max_seq_len) as u64 * h + 2 * h;
                let norms = self.num_layers as u64 * 4 * h;
                emb + norms + layout.iter().map(|l| lin(l.2, l.3)).sum::<u64>()
            }
        }
    }
}

/// Closed-form injection report for a fresh encoder built from `cfg`.
pub fn plan_injection(cfg: &EncoderConfig, acfg: &AdapterConfig) -> InjectionReport {
    let total_base = cfg.count_parameters(ParamFilter::All);
    let mut report = InjectionReport::default();
    let mut frozen_weights = 0u64;
    for (path, kind, k, d) in cfg.linear_layout() {
        if !acfg.mode.wraps(kind) {
            continue;
        }
        let r = acfg.rank;
        let trainable = r * (d + k) + if acfg.use_dora { k } else { 0 };
        report.layers.push(InjectedLayer { path, d, k, r, trainable });
        frozen_weights += (d * k) as u64;
    }
    let adapters = report.adapter_parameters();
    report.total_backbone = total_base + adapters;
    report.trainable_backbone = if acfg.mode.is_only() {
        adapters
    } else {
        total_base - frozen_weights + adapters
    };
    report
}

/// Token ids plus a 0/1 attention mask, both `[batch, seq]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<f32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, mask: Vec<f32>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || mask.len() != ids.len() {
            return shape_err(
                "TokenBatch",
                format!("{} ids / {} mask entries for [{}, {}]", ids.len(), mask.len(), batch, seq),
            );
        }
        Ok(Self { ids, mask, batch, seq })
    }

    /// Pad variable-length sequences with id 0 and mask 0.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(1.0, s.len()));
            ids.extend(std::iter::repeat_n(0, seq - s.len()));
            mask.extend(std::iter::repeat_n(0.0, seq - s.len()));
        }
        Self::new(ids, mask, seqs.len(), seq)
    }
}

pub struct Embeddings {
    pub word: Embedding,
    pub position: Embedding,
    pub norm: LayerNorm,
}

pub struct TransformerLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub intermediate: Linear,
    pub output: Linear,
    pub out_norm: LayerNorm,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<TransformerLayer>,
    pub pooler: Linear,
    adapter_mode: AdapterMode,
    directive: FreezeDirective,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (h, f) = (cfg.hidden, cfg.ff_dim);
        let init = Init::Normal(cfg.init_std());
        let embeddings = Embeddings {
            word: Embedding::new(seed, "embeddings.word_embeddings", cfg.vocab_size, h, INIT_STD)?,
            position: Embedding::new(seed, "embeddings.position_embeddings", cfg.max_seq_len, h, INIT_STD)?,
            norm: LayerNorm::new(h)?,
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = format!("layer.{i}");
            let lin = |name: &str, i, o| Linear::new(seed, &format!("{p}.{name}"), i, o, init);
            layers.push(TransformerLayer {
                query: lin("attention.query", h, h)?,
                key: lin("attention.key", h, h)?,
                value: lin("attention.value", h, h)?,
                attn_out: lin("attention.output.dense", h, h)?,
                attn_norm: LayerNorm::new(h)?,
                intermediate: lin("intermediate.dense", h, f)?,
                output: lin("output.dense", f, h)?,
                out_norm: LayerNorm::new(h)?,
            });
        }
        Ok(Self {
            cfg,
            embeddings,
            layers,
            pooler: Linear::new(seed, "pooler.dense", h, h, init)?,
            adapter_mode: AdapterMode::None,
            directive: FreezeDirective::UnfreezeAll,
        })
    }

    pub fn adapter_mode(&self) -> AdapterMode {
        self.adapter_mode
    }

    pub fn directive(&self) -> FreezeDirective {
        self.directive
    }

    pub fn is_adapted(&self) -> bool {
        self.linears().iter().any(|(_, _, l)| l.adapter.is_some())
    }

    pub fn linears(&self) -> Vec<(String, LinearKind, &Linear)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{i}");
            out.push((format!("{p}.attention.query"), LinearKind::Qkv, &l.query));
            out.push((format!("{p}.attention.key"), LinearKind::Qkv, &l.key));
            out.push((format!("{p}.attention.value"), LinearKind::Qkv, &l.value));
            out.push((format!("{p}.attention.output.dense"), LinearKind::AttnOut, &l.attn_out));
            out.push((format!("{p}.intermediate.dense"), LinearKind::Intermediate, &l.intermediate));
            out.push((format!("{p}.output.dense"), LinearKind::Output, &l.output));
        }
        out.push(("pooler.dense".into(), LinearKind::Pooler, &self.pooler));
        out
    }

    fn linears_mut(&mut self) -> Vec<(String, LinearKind, &mut Linear)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layer.{i}");
            out.push((format!("{p}.attention.query"), LinearKind::Qkv, &mut l.query));
            out.push((format!("{p}.attention.key"), LinearKind::Qkv, &mut l.key));
            out.push((format!("{p}.attention.value"), LinearKind::Qkv, &mut l.value));
            out.push((format!("{p}.attention.output.dense"), LinearKind::AttnOut, &mut l.attn_out));
            out.push((format!("{p}.intermediate.dense"), LinearKind::Intermediate, &mut l.intermediate));
            out.push((format!("{p}.output.dense"), LinearKind::Output, &mut l.output));
        }
        out.push(("pooler.dense".into(), LinearKind::Pooler, &mut self.pooler));
        out
    }

    /// Wrap the linears selected by `cfg.mode` and apply its freezing policy.
    /// `prefix` only labels report paths.
    pub fn inject(&mut self, cfg: &AdapterConfig, seed: u64, prefix: &str) -> Result<InjectionReport> {
        if self.is_adapted() {
            return Err(Error::Adapter("adapters are already injected".into()));
        }
        let mut report = InjectionReport::default();
        for (path, kind, lin) in self.linears_mut() {
            if cfg.mode.wraps(kind) {
                let mut layer = wrap_linear(seed, &path, lin, cfg)?;
                layer.path = join(prefix, &path);
                report.layers.push(layer);
            }
        }
        self.adapter_mode = cfg.mode;
        let saved = self.directive;
        self.directive = FreezeDirective::UnfreezeAll;
        self.refresh_trainable();
        report.trainable_backbone = self.num_trainable();
        report.total_backbone = self.num_parameters();
        self.directive = saved;
        self.refresh_trainable();
        Ok(report)
    }

    pub fn apply_freeze(&mut self, directive: FreezeDirective) -> Result<()> {
        self.directive = directive.validate(self.cfg.num_layers)?;
        self.refresh_trainable();
        Ok(())
    }

    /// Recompute every `requires_grad` flag from the adapter mode and the
    /// current freeze directive.
    pub fn refresh_trainable(&self) {
        let tensors = self.named_tensors("");
        let wrapped: HashSet<String> = tensors
            .iter()
            .filter(|(_, _, r)| *r == Role::AdapterA)
            .filter_map(|(p, _, _)| p.strip_suffix(".lora_A").map(str::to_string))
            .collect();
        for (path, t, role) in &tensors {
            let owner = path.rsplit_once('.').map(|(o, _)| o).unwrap_or("");
            let is_wrapped = wrapped.contains(owner);
            let site = site_of(path);
            let on = site.unlocked(self.directive, self.cfg.num_layers)
                && policy_trainable(self.adapter_mode, *role, is_wrapped);
            t.set_requires_grad(on);
        }
    }

    /// Count over the tensors this encoder actually holds.
    pub fn count_parameters(&self, filter: ParamFilter) -> u64 {
        match filter {
            ParamFilter::All => self.num_parameters(),
            ParamFilter::AttnLinears | ParamFilter::OtherLinears => self
                .linears()
                .into_iter()
                .filter(|(_, kind, _)| match filter {
                    ParamFilter::AttnLinears => *kind == LinearKind::Qkv,
                    _ => matches!(kind, LinearKind::AttnOut | LinearKind::Intermediate | LinearKind::Output),
                })
                .map(|(_, _, l)| (l.weight.numel() + l.bias.numel()) as u64)
                .sum(),
        }
    }

    /// Pooled sentence embeddings `[batch, hidden]`.
    pub fn forward(&self, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (b, l, h) = (batch.batch, batch.seq, self.cfg.hidden);
        if l > self.cfg.max_seq_len {
            return shape_err(
                "encode",
                format!("sequence length {} exceeds max_seq_len {}", l, self.cfg.max_seq_len),
            );
        }
        let p = self.cfg.dropout_p;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let words = self.embeddings.word.forward(&batch.ids, &[b, l])?;
        let pos = self.embeddings.position.forward(&positions, &[b, l])?;
        let mut x = self.embeddings.norm.forward(&words.add(&pos)?)?;
        x = ctx.dropout(&x, p)?;

        let bias: Vec<f32> = batch.mask.iter().map(|&m| (1.0 - m) * MASK_BIAS).collect();
        let bias = Tensor::new(bias, &[b, 1, 1, l])?;
        for layer in &self.layers {
            x = self.layer_forward(layer, &x, &bias, ctx)?;
        }
        let first = x.narrow(1, 0, 1)?.reshape(&[b, h])?;
        Ok(self.pooler.forward(&first)?.tanh().cast(DType::F32))
    }

    fn layer_forward(
        &self,
        layer: &TransformerLayer,
        x: &Tensor,
        mask_bias: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let (b, l, h) = (x.dim(0), x.dim(1), x.dim(2));
        let nh = self.cfg.num_heads;
        let hd = h / nh;
        let p = self.cfg.dropout_p;
        let heads = |t: Tensor, perm: &[usize]| -> Result<Tensor> { t.reshape(&[b, l, nh, hd])?.permute(perm) };
        let q = heads(layer.query.forward(x)?, &[0, 2, 1, 3])?;
        let k = heads(layer.key.forward(x)?, &[0, 2, 3, 1])?;
        let v = heads(layer.value.forward(x)?, &[0, 2, 1, 3])?;
        let scores = q.matmul(&k)?.mul_scalar(1.0 / (hd as f32).sqrt()).add(mask_bias)?;
        let probs = ctx.dropout(&scores.softmax()?, p)?;
        let ctx_out = probs.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, h])?;
        let attn = ctx.dropout(&layer.attn_out.forward(&ctx_out)?, p)?;
        let x = layer.attn_norm.forward(&attn.add(x)?)?;
        let inter = layer.intermediate.forward(&x)?.gelu();
        let out = ctx.dropout(&layer.output.forward(&inter)?, p)?;
        layer.out_norm.forward(&out.add(&x)?)
    }
}

/// Locate a backbone tensor path (relative to the encoder) for layer locking.
pub fn site_of(path: &str) -> Site {
    if let Some(rest) = path.strip_prefix("layer.") {
        let idx = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        Site::Layer(idx)
    } else if path.starts_with("pooler") {
        Site::Pooler
    } else {
        Site::Embeddings
    }
}

impl Module for Encoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(Named<'a>)) {
        let e = join(prefix, "embeddings");
        self.embeddings.word.visit(&join(&e, "word_embeddings"), f);
        self.embeddings.position.visit(&join(&e, "position_embeddings"), f);
        self.embeddings.norm.visit(&join(&e, "LayerNorm"), f);
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer.{i}"));
            l.query.visit(&format!("{p}.attention.query"), f);
            l.key.visit(&format!("{p}.attention.key"), f);
            l.value.visit(&format!("{p}.attention.value"), f);
            l.attn_out.visit(&format!("{p}.attention.output.dense"), f);
            l.attn_norm.visit(&format!("{p}.attention.output.LayerNorm"), f);
            l.intermediate.visit(&format!("{p}.intermediate.dense"), f);
            l.output.visit(&format!("{p}.output.dense"), f);
            l.out_norm.visit(&format!("{p}.output.LayerNorm"), f);
        }
        self.pooler.visit(&join(prefix, "pooler.dense"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bert_base_counts() {
        let c = EncoderConfig::bert_base();
        assert_eq!(c.count_parameters(ParamFilter::AttnLinears), 12 * 3 * (768 * 768 + 768));
        assert_eq!(c.count_parameters(ParamFilter::AttnLinears), 21_261_312);
        assert_eq!(c.count_parameters(ParamFilter::OtherLinears), 63_756_288);
    }

    #[test]
    fn desk_counts_match_built_encoder() {
        let c = EncoderConfig::desk();
        let e = Encoder::new(c, 1).unwrap();
        assert_eq!(c.count_parameters(ParamFilter::AttnLinears), 6_336);
        for f in [ParamFilter::All, ParamFilter::AttnLinears, ParamFilter::OtherLinears] {
            assert_eq!(e.count_parameters(f), c.count_parameters(f));
        }
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let mut c = EncoderConfig::desk();
        c.max_seq_len = 4;
        let e = Encoder::new(c, 0).unwrap();
        let b = TokenBatch::from_sequences(&[vec![2, 5, 6, 7, 8]]).unwrap();
        assert!(e.forward(&b, &mut ForwardCtx::eval()).is_err());
    }

    #[test]
    fn site_parsing() {
        assert_eq!(site_of("layer.10.attention.query.weight"), Site::Layer(10));
        assert_eq!(site_of("pooler.dense.bias"), Site::Pooler);
        assert_eq!(site_of("embeddings.LayerNorm.weight"), Site::Embeddings);
    }
}
