//! Command-line front end: `train`, `eval`, `ensemble` and `bench`.
//!
//! Flag names follow the original training scripts (`--fine-tune-mode`,
//! `--lr_lambda`, `--num_sst_trains`, ...), so their command lines run
//! verbatim. Flags left unset take the desk defaults of [`TrainConfig::desk`].

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adapters::{AdapterConfig, AdapterMode};
use crate::bench::{self, BenchContext, GridSpec};
use crate::data::{load_tsv, split, synth_tasks, SynthSizes, TaskData};
use crate::encoder::EncoderConfig;
use crate::ensemble::load_ensemble;
use crate::error::{Error, Result};
use crate::heads::{Architecture, ClfKind, Task};
use crate::losses::{ContrastiveConvention, LossKind, LossSpec};
use crate::optim::{LrSchedule, OptimKind};
use crate::train::{evaluate, fit, load_checkpoint, predict_outputs, FineTuneMode, LoopKind, Scores, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "minbert-peft", version, about = "Multitask encoder fine-tuning with LoRA/DoRA adapters")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a multitask model.
    Train(TrainArgs),
    /// Score a checkpoint on dev data.
    Eval(EvalArgs),
    /// Score the mean-of-outputs ensemble of several checkpoints.
    Ensemble(EnsembleArgs),
    /// Run a benchmark sweep and write a CSV report.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long = "sst_train")]
    pub sst_train: Option<PathBuf>,
    #[arg(long = "sst_dev")]
    pub sst_dev: Option<PathBuf>,
    #[arg(long = "para_train")]
    pub para_train: Option<PathBuf>,
    #[arg(long = "para_dev")]
    pub para_dev: Option<PathBuf>,
    #[arg(long = "sts_train")]
    pub sts_train: Option<PathBuf>,
    #[arg(long = "sts_dev")]
    pub sts_dev: Option<PathBuf>,
    /// Seed of the synthetic tasks used when no TSV paths are given.
    #[arg(long = "data_seed", default_value_t = 0)]
    pub data_seed: u64,
    /// Examples per synthetic task before the 80/10/10 split.
    #[arg(long = "synthetic_size", default_value_t = 1000)]
    pub synthetic_size: usize,
}

impl DataArgs {
    fn train_paths(&self) -> [&Option<PathBuf>; 3] {
        [&self.sst_train, &self.para_train, &self.sts_train]
    }

    fn dev_paths(&self) -> [&Option<PathBuf>; 3] {
        [&self.sst_dev, &self.para_dev, &self.sts_dev]
    }

    fn uses_files(&self) -> bool {
        self.train_paths().iter().chain(self.dev_paths().iter()).any(|p| p.is_some())
    }

    fn synthetic(&self) -> Result<(TaskData, TaskData)> {
        let n = self.synthetic_size;
        let all = synth_tasks(self.data_seed, SynthSizes { sst: n, para: n, sts: n })?;
        let (train, dev, _test) = split(&all, self.data_seed);
        Ok((train, dev))
    }

    /// Train and dev sets. TSV paths must be given for every task or for none.
    pub fn load(&self) -> Result<(TaskData, TaskData)> {
        if !self.uses_files() {
            return self.synthetic();
        }
        let train = read_set(self.train_paths(), "train")?;
        let dev = read_set(self.dev_paths(), "dev")?;
        Ok((train, dev))
    }

    /// Dev set only, for scoring saved models.
    pub fn load_dev(&self) -> Result<TaskData> {
        if !self.dev_paths().iter().any(|p| p.is_some()) {
            if self.uses_files() {
                return Err(Error::Usage("scoring needs --sst_dev, --para_dev and --sts_dev".into()));
            }
            return Ok(self.synthetic()?.1);
        }
        read_set(self.dev_paths(), "dev")
    }
}

fn read_set(paths: [&Option<PathBuf>; 3], which: &str) -> Result<TaskData> {
    let mut data = TaskData::default();
    for (task, p) in Task::ALL.into_iter().zip(paths) {
        let Some(p) = p else {
            return Err(Error::Usage(format!("missing --{}_{which} (give TSV paths for all tasks or none)", task.as_str())));
        };
        let load = load_tsv(p, task)?;
        if load.skipped > 0 {
            log::warn!("{}: skipped {} malformed rows", p.display(), load.skipped);
        }
        let d = load.data;
        match task {
            Task::Sst => data.sst = d.sst,
            Task::Para => data.para = d.para,
            Task::Sts => data.sts = d.sts,
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderPreset {
    Desk,
    BertBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LoopArg {
    Sequential,
    Interleaved,
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    AsWritten,
    Standard,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// last-layer, full-model or iterative.
    #[arg(long = "fine-tune-mode", alias = "fine_tune_mode")]
    pub fine_tune_mode: Option<FineTuneMode>,
    /// Optimizer name; checked when the config is built.
    #[arg(long)]
    pub optim: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-epoch multiplicative learning-rate factor.
    #[arg(long = "lr_lambda")]
    pub lr_lambda: Option<f64>,
    #[arg(long = "batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub amp: bool,
    /// Accepted for compatibility; everything runs on the CPU.
    #[arg(long = "use_gpu")]
    pub use_gpu: bool,
    #[arg(long)]
    pub clf: Option<ClfKind>,
    #[arg(long)]
    pub architecture: Option<Architecture>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderPreset>,
    #[arg(long = "lora_mode")]
    pub lora_mode: Option<AdapterMode>,
    #[arg(long = "lora_rank", requires = "lora_mode")]
    pub lora_rank: Option<usize>,
    #[arg(long = "use_dora", requires = "lora_mode")]
    pub use_dora: bool,
    #[arg(long = "train_sst")]
    pub train_sst: bool,
    #[arg(long = "train_quora")]
    pub train_quora: bool,
    #[arg(long = "train_sts")]
    pub train_sts: bool,
    #[arg(long = "sst_weight_decay")]
    pub sst_weight_decay: Option<f64>,
    #[arg(long = "para_weight_decay")]
    pub para_weight_decay: Option<f64>,
    #[arg(long = "sts_weight_decay")]
    pub sts_weight_decay: Option<f64>,
    #[arg(long = "sst_lr_multiplier")]
    pub sst_lr_multiplier: Option<f64>,
    #[arg(long = "para_lr_multiplier")]
    pub para_lr_multiplier: Option<f64>,
    #[arg(long = "sts_lr_multiplier")]
    pub sts_lr_multiplier: Option<f64>,
    #[arg(long = "num_sst_trains")]
    pub num_sst_trains: Option<usize>,
    #[arg(long = "num_quora_trains")]
    pub num_quora_trains: Option<usize>,
    #[arg(long = "num_sts_trains")]
    pub num_sts_trains: Option<usize>,
    /// Loss spec: `kind`, `mixed:W0,W1` or `contrastive:MARGIN`.
    #[arg(long = "sst_loss")]
    pub sst_loss: Option<String>,
    #[arg(long = "para_loss")]
    pub para_loss: Option<String>,
    #[arg(long = "sts_loss")]
    pub sts_loss: Option<String>,
    #[arg(long = "contrastive_convention", value_enum)]
    pub contrastive_convention: Option<ConventionArg>,
    #[arg(long = "loop", value_enum)]
    pub loop_kind: Option<LoopArg>,
    #[arg(long = "quora_start_epoch")]
    pub quora_start_epoch: Option<usize>,
    #[arg(long = "memory_cap")]
    pub memory_cap: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "run_id")]
    pub run_id: Option<String>,
    /// Where to save the best checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-task, per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

fn parse_loss(task: Task, s: &str, convention: ContrastiveConvention) -> Result<LossSpec> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let kind: LossKind = kind.parse()?;
    let mut spec = LossSpec::new(task, kind);
    spec.convention = convention;
    let num = |v: &str| {
        v.trim().parse::<f32>().map_err(|_| Error::Usage(format!("bad number '{v}' in loss spec '{s}'")))
    };
    match (kind, arg) {
        (_, None) => {}
        (LossKind::Mixed, Some(a)) => {
            let (w0, w1) = a
                .split_once(',')
                .ok_or_else(|| Error::Usage(format!("mixed loss takes two weights, got '{a}'")))?;
            spec.mix_weights = (num(w0)?, num(w1)?);
        }
        (LossKind::Contrastive, Some(a)) => spec.margin = num(a)?,
        (k, Some(_)) => return Err(Error::Usage(format!("loss '{}' takes no arguments", k.as_str()))),
    }
    spec.validate()?;
    Ok(spec)
}

impl TrainArgs {
    /// Lay the flags over the desk defaults.
    pub fn to_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk(self.seed);
        if let Some(id) = &self.run_id {
            cfg.run_id = id.clone();
        }
        if self.encoder == Some(EncoderPreset::BertBase) {
            cfg.model.encoder = EncoderConfig::bert_base();
        }
        if let Some(m) = self.fine_tune_mode {
            cfg.fine_tune_mode = m;
        }
        if let Some(c) = self.clf {
            cfg.model.clf = c;
        }
        if let Some(a) = self.architecture {
            cfg.model.architecture = a;
        }
        if let Some(mode) = self.lora_mode {
            cfg.model.adapter = AdapterConfig::new(self.lora_rank.unwrap_or(1), mode, self.use_dora)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.amp = self.amp;

        let picked = [self.train_sst, self.train_quora, self.train_sts];
        if picked.iter().any(|&t| t) {
            cfg.tasks = picked;
        }

        if let Some(name) = &self.optim {
            cfg.optim.kind = name.parse::<OptimKind>()?;
        }
        if let Some(lr) = self.lr {
            cfg.optim.lr = lr;
        }
        if let Some(gamma) = self.lr_lambda {
            cfg.optim.schedule = LrSchedule::Multiplicative { gamma };
        }
        let per_task = |vals: [Option<f64>; 3], dst: &mut [f64; 3]| {
            for (d, v) in dst.iter_mut().zip(vals) {
                if let Some(v) = v {
                    *d = v;
                }
            }
        };
        per_task(
            [self.sst_weight_decay, self.para_weight_decay, self.sts_weight_decay],
            &mut cfg.optim.weight_decays,
        );
        per_task(
            [self.sst_lr_multiplier, self.para_lr_multiplier, self.sts_lr_multiplier],
            &mut cfg.optim.multipliers,
        );
        for (d, v) in cfg.num_trains.iter_mut().zip([self.num_sst_trains, self.num_quora_trains, self.num_sts_trains]) {
            if let Some(v) = v {
                *d = v;
            }
        }

        let convention = match self.contrastive_convention {
            Some(ConventionArg::Standard) => ContrastiveConvention::Standard,
            _ => ContrastiveConvention::AsWritten,
        };
        for (task, s) in Task::ALL.into_iter().zip([&self.sst_loss, &self.para_loss, &self.sts_loss]) {
            if let Some(s) = s {
                cfg.losses[task.index()] = parse_loss(task, s, convention)?;
            }
        }
        if let Some(l) = self.loop_kind {
            cfg.loop_kind = match l {
                LoopArg::Sequential => LoopKind::Sequential,
                LoopArg::Interleaved => LoopKind::Interleaved,
                LoopArg::Composite => LoopKind::Composite,
            };
        }
        if let Some(q) = self.quora_start_epoch {
            cfg.quora_start_epoch = q;
        }
        cfg.memory_cap = self.memory_cap;
        cfg.checkpoint = self.checkpoint.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, required = true)]
    pub checkpoint: PathBuf,
    /// Write raw dev outputs as JSON.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long = "batch_size", default_value_t = 64)]
    pub batch_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleArgs {
    /// Member checkpoints; a repeated path counts once per listing.
    #[arg(long, num_args = 1.., required = true)]
    pub filepaths: Vec<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long = "batch_size", default_value_t = 64)]
    pub batch_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Every feasible point of `--grid`.
    Grid,
    /// AMP by adapter mode by LoRA/DoRA.
    Ablation,
    /// One adapter mode across `--ranks` and `--seeds`.
    Ranks,
    /// Baseline against LoRA and DoRA with AMP.
    Final,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Suite::Grid)]
    pub suite: Suite,
    /// `default-desk` or `full`.
    #[arg(long, default_value = "default-desk")]
    pub grid: String,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Config id to normalize against; defaults to the first successful row.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long = "lora_mode", default_value = "all-lin")]
    pub lora_mode: AdapterMode,
    #[arg(long = "use_dora")]
    pub use_dora: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 5, 10])]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Epochs for the ablation, rank and final suites.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

/// Turn a `key=value` file into flags. Blank lines and `#` comments are
/// skipped; `true`/`false` values toggle switches.
pub fn config_file_args(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let flag = format!("--{}", k.trim().trim_start_matches("--"));
        match v.trim() {
            "true" => out.push(flag.into()),
            "false" => {}
            v => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Expand any `--config FILE` into its flags (placed right after the
/// subcommand, so explicit flags still win) and parse. Help and version
/// requests print and exit.
pub fn parse_args<I, T>(argv: I) -> Result<Cli>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let mut rest = Vec::with_capacity(argv.len());
    let mut from_file = Vec::new();
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let p = it.next().ok_or_else(|| Error::Usage("--config needs a path".into()))?;
            from_file.extend(config_file_args(Path::new(&p))?);
        } else if let Some(p) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            from_file.extend(config_file_args(Path::new(p))?);
        } else {
            rest.push(a);
        }
    }
    if !from_file.is_empty() {
        let at = rest.len().min(2);
        rest.splice(at..at, from_file);
    }
    Cli::try_parse_from(rest).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => e.exit(),
        _ => Error::Usage(e.render().to_string()),
    })
}

fn fmt_scores(s: &Scores) -> String {
    format!(
        "sst_acc {:.3}  para_acc {:.3}  sts_pearson {:.3}  overall {:.3}",
        s.sst_acc, s.para_acc, s.sts_pearson, s.overall
    )
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn run_train<W: Write>(args: &TrainArgs, out: &mut W) -> Result<()> {
    if args.use_gpu {
        writeln!(out, "note: --use_gpu ignored, running on the CPU")?;
    }
    let cfg = args.to_config()?;
    let (train, dev) = args.data.load()?;
    let res = fit(&cfg, &train, &dev)?;
    for e in &res.metrics.epochs {
        writeln!(out, "epoch {} [{}]: {}", e.epoch, e.directive, fmt_scores(&e.scores))?;
    }
    if let (Some(best), Some(epoch)) = (res.metrics.best_overall, res.metrics.best_epoch) {
        writeln!(out, "best overall {best:.3} at epoch {epoch}")?;
    }
    if let Some(p) = &args.metrics {
        res.metrics.write_csv(fs::File::create(p)?)?;
    }
    if let Some(p) = &cfg.checkpoint {
        writeln!(out, "checkpoint: {}", p.display())?;
    }
    Ok(())
}

pub fn run_eval<W: Write>(args: &EvalArgs, out: &mut W) -> Result<()> {
    let (model, header) = load_checkpoint(&args.checkpoint)?;
    let dev = args.data.load_dev()?;
    let loaders = crate::train::Loaders::new(&dev, &model.cfg, args.batch_size, [true; 3])?;
    let scores = evaluate(&model, &loaders)?;
    writeln!(out, "{} (epoch {}): {}", args.checkpoint.display(), header.epoch, fmt_scores(&scores))?;
    if let Some(p) = &args.predictions {
        write_json(p, &predict_outputs(&model, &loaders)?)?;
    }
    Ok(())
}

pub fn run_ensemble<W: Write>(args: &EnsembleArgs, out: &mut W) -> Result<()> {
    let ens = load_ensemble(&args.filepaths)?;
    let dev = args.data.load_dev()?;
    let cfg = ens.members()[0].cfg;
    let loaders = crate::train::Loaders::new(&dev, &cfg, args.batch_size, [true; 3])?;
    let scores = ens.evaluate(&loaders)?;
    writeln!(out, "ensemble of {}: {}", ens.len(), fmt_scores(&scores))?;
    if let Some(p) = &args.predictions {
        write_json(p, &ens.predict_outputs(&loaders)?)?;
    }
    Ok(())
}

pub fn run_bench<W: Write>(args: &BenchArgs, out: &mut W) -> Result<()> {
    let (train, dev) = args.data.load()?;
    let mut base = TrainConfig::desk(0);
    if let Some(e) = args.epochs {
        base.epochs = e;
    }
    let ctx = BenchContext { base, train, dev };
    let table = match args.suite {
        Suite::Grid => {
            let configs = bench::expand_grid(&GridSpec::by_name(&args.grid)?)?;
            writeln!(out, "running {} configs", configs.len())?;
            bench::run_grid(&ctx, &configs, args.parallelism)
        }
        Suite::Ablation => bench::ablation_suite(&ctx, args.parallelism)?,
        Suite::Ranks => bench::rank_sweep(&ctx, args.lora_mode, args.use_dora, &args.ranks, &args.seeds),
        Suite::Final => bench::final_model_ab(&ctx, &args.seeds, args.parallelism),
    };
    let baseline = match &args.baseline {
        Some(b) => Some(b.clone()),
        None if table.rows.iter().any(|r| r.normalized.is_some()) => None,
        None => table.rows.iter().find(|r| r.is_ok()).map(|r| r.config.id.clone()),
    };
    let table = match baseline {
        Some(b) => bench::normalize(&table, &b)?,
        None => table,
    };
    let summary = bench::emit_report(&table, &args.out)?;
    write!(out, "{summary}")?;
    writeln!(out, "wrote {}", args.out.display())?;
    Ok(())
}

pub fn run<W: Write>(cli: &Cli, out: &mut W) -> Result<()> {
    match &cli.command {
        Command::Train(a) => run_train(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Ensemble(a) => run_ensemble(a, out),
        Command::Bench(a) => run_bench(a, out),
    }
}
