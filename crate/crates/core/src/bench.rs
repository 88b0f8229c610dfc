//! Benchmark sweeps over adapter, precision and schedule settings, with
//! baseline normalization and CSV reports.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterMode};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::train::{fit, FineTuneMode, TrainConfig};

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub id: String,
    pub amp: bool,
    pub mode: AdapterMode,
    pub rank: usize,
    pub dora: bool,
    pub fine_tune_mode: FineTuneMode,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl BenchConfig {
    fn make_id(&mut self) {
        self.id = format!(
            "amp{}-{}-r{}-{}-{}-bs{}-lr{:e}-e{}-s{}",
            self.amp as u8,
            self.mode,
            self.rank,
            if self.dora { "dora" } else { "lora" },
            self.fine_tune_mode.as_str(),
            self.batch_size,
            self.lr,
            self.epochs,
            self.seed
        );
    }

    pub fn new(
        amp: bool,
        mode: AdapterMode,
        rank: usize,
        dora: bool,
        fine_tune_mode: FineTuneMode,
        batch_size: usize,
        lr: f64,
        epochs: usize,
        seed: u64,
    ) -> Self {
        let mut c = Self { id: String::new(), amp, mode, rank, dora, fine_tune_mode, batch_size, lr, epochs, seed };
        c.make_id();
        c
    }

    /// Apply this point to a base training config.
    pub fn to_train(&self, base: &TrainConfig) -> Result<TrainConfig> {
        if self.mode == AdapterMode::None && self.dora {
            return Err(Error::Config("infeasible: DoRA needs an adapter mode".into()));
        }
        let mut cfg = base.clone();
        cfg.run_id = self.id.clone();
        cfg.amp = self.amp;
        cfg.fine_tune_mode = self.fine_tune_mode;
        cfg.batch_size = self.batch_size;
        cfg.optim.lr = self.lr;
        cfg.epochs = self.epochs;
        cfg.seed = self.seed;
        cfg.model.seed = self.seed;
        cfg.model.adapter = if self.mode == AdapterMode::None {
            AdapterConfig::none()
        } else {
            AdapterConfig::new(self.rank, self.mode, self.dora)?
        };
        cfg.checkpoint = None;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub amp: Vec<bool>,
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub lora_rank: Vec<usize>,
    pub lora_mode: Vec<AdapterMode>,
    pub dora: Vec<bool>,
    pub fine_tune_mode: Vec<FineTuneMode>,
    pub epochs: Vec<usize>,
    pub seed: u64,
}

impl GridSpec {
    /// The full-size LoRA/DoRA grid: 960 raw combinations.
    pub fn full() -> Self {
        Self {
            amp: vec![true],
            lr: vec![1e-4, 5e-5, 1e-5, 5e-6],
            batch_size: vec![64, 128, 256, 384],
            lora_rank: vec![1, 5, 10],
            lora_mode: vec![
                AdapterMode::None,
                AdapterMode::AllLin,
                AdapterMode::Attn,
                AdapterMode::AllLinOnly,
                AdapterMode::AttnOnly,
            ],
            dora: vec![false, true],
            fine_tune_mode: vec![FineTuneMode::FullModel, FineTuneMode::LastLayer],
            epochs: vec![3],
            seed: 0,
        }
    }

    /// A small sweep that runs in seconds on the desk model.
    pub fn desk() -> Self {
        Self {
            amp: vec![true],
            lr: vec![2e-3],
            batch_size: vec![32],
            lora_rank: vec![1, 5],
            lora_mode: vec![AdapterMode::None, AdapterMode::Attn, AdapterMode::AllLin],
            dora: vec![false],
            fine_tune_mode: vec![FineTuneMode::FullModel],
            epochs: vec![2],
            seed: 0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "default-desk" | "desk" => Ok(Self::desk()),
            "full" | "n1" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown grid '{other}'"))),
        }
    }

    pub fn raw_size(&self) -> usize {
        self.amp.len()
            * self.lr.len()
            * self.batch_size.len()
            * self.lora_rank.len()
            * self.lora_mode.len()
            * self.dora.len()
            * self.fine_tune_mode.len()
            * self.epochs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let empty = self.amp.is_empty()
            || self.lr.is_empty()
            || self.batch_size.is_empty()
            || self.lora_rank.is_empty()
            || self.lora_mode.is_empty()
            || self.dora.is_empty()
            || self.fine_tune_mode.is_empty()
            || self.epochs.is_empty();
        if empty {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }
}

/// Cartesian product minus infeasible points. Mode `none` collapses rank and
/// DoRA to one representative; DoRA needs an adapter; last-layer training
/// freezes the whole backbone, adapters included, so it only pairs with `none`.
pub fn expand_grid(spec: &GridSpec) -> Result<Vec<BenchConfig>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &amp in &spec.amp {
        for &lr in &spec.lr {
            for &bs in &spec.batch_size {
                for &ftm in &spec.fine_tune_mode {
                    for &epochs in &spec.epochs {
                        for &mode in &spec.lora_mode {
                            if mode == AdapterMode::None {
                                out.push(BenchConfig::new(amp, mode, spec.lora_rank[0], false, ftm, bs, lr, epochs, spec.seed));
                                continue;
                            }
                            if ftm == FineTuneMode::LastLayer {
                                continue;
                            }
                            for &rank in &spec.lora_rank {
                                for &dora in &spec.dora {
                                    out.push(BenchConfig::new(amp, mode, rank, dora, ftm, bs, lr, epochs, spec.seed));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub time: f64,
    pub memory: f64,
    pub sst_acc: f64,
    pub para_acc: f64,
    pub sts_pearson: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: BenchConfig,
    /// Tasks trained, joined with '+'.
    pub task: String,
    pub status: RunStatus,
    pub avg_epoch_ms: f64,
    pub avg_peak_bytes: f64,
    /// Mean ledger bytes held between forward and backward, per step.
    pub avg_activation_bytes: f64,
    pub trainable_params: u64,
    pub sst_acc: f64,
    pub para_acc: f64,
    pub sts_pearson: f64,
    pub overall: f64,
    pub normalized: Option<Normalized>,
}

impl BenchRow {
    fn failed(config: BenchConfig, task: String, reason: String) -> Self {
        Self {
            config,
            task,
            status: RunStatus::Failed(reason),
            avg_epoch_ms: 0.0,
            avg_peak_bytes: 0.0,
            avg_activation_bytes: 0.0,
            trainable_params: 0,
            sst_acc: 0.0,
            para_acc: 0.0,
            sts_pearson: 0.0,
            overall: 0.0,
            normalized: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, id: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.config.id == id)
    }
}

/// Shared inputs of a sweep: base config and datasets.
pub struct BenchContext {
    pub base: TrainConfig,
    pub train: TaskData,
    pub dev: TaskData,
}

fn task_label(cfg: &TrainConfig) -> String {
    crate::heads::Task::ALL
        .iter()
        .filter(|t| cfg.tasks[t.index()])
        .map(|t| t.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

/// Run one point. Errors become a failure row.
pub fn run_config(ctx: &BenchContext, cfg: &BenchConfig) -> BenchRow {
    let tcfg = match cfg.to_train(&ctx.base) {
        Ok(c) => c,
        Err(e) => return BenchRow::failed(cfg.clone(), task_label(&ctx.base), format!("config: {e}")),
    };
    let task = task_label(&tcfg);
    match fit(&tcfg, &ctx.train, &ctx.dev) {
        Err(e) => {
            let reason = match e {
                Error::MemoryCap { .. } => format!("memory-cap: {e}"),
                other => format!("error: {other}"),
            };
            BenchRow::failed(cfg.clone(), task, reason)
        }
        Ok(out) => {
            let (avg_epoch_ms, avg_peak_bytes) = out.metrics.averages();
            let steps = &out.metrics.steps;
            let avg_activation_bytes = if steps.is_empty() {
                0.0
            } else {
                steps.iter().map(|s| s.activation_bytes as f64).sum::<f64>() / steps.len() as f64
            };
            // Trainable count under the final epoch's directive.
            let trainable_params = out.model.num_trainable();
            let s = out.metrics.best_scores().expect("at least one epoch ran");
            BenchRow {
                config: cfg.clone(),
                task,
                status: RunStatus::Ok,
                avg_epoch_ms,
                avg_peak_bytes,
                avg_activation_bytes,
                trainable_params,
                sst_acc: s.sst_acc,
                para_acc: s.para_acc,
                sts_pearson: s.sts_pearson,
                overall: s.overall,
                normalized: None,
            }
        }
    }
}

/// Run every config on up to `parallelism` threads. Rows come back in config
/// order whatever the thread count; each run owns its model and ledger.
pub fn run_grid(ctx: &BenchContext, configs: &[BenchConfig], parallelism: usize) -> BenchTable {
    let workers = parallelism.clamp(1, configs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<BenchRow>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let row = run_config(ctx, &configs[i]);
                slots.lock().expect("collector lock")[i] = Some(row);
            });
        }
    });
    let rows = slots.into_inner().expect("collector lock").into_iter().map(|r| r.expect("every slot filled")).collect();
    BenchTable { rows }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Divide time, memory and score fields of every successful row by the baseline row's.
pub fn normalize(table: &BenchTable, baseline_id: &str) -> Result<BenchTable> {
    let base = table
        .row(baseline_id)
        .ok_or_else(|| Error::Config(format!("baseline '{baseline_id}' is not in the table")))?;
    if !base.is_ok() {
        return Err(Error::Config(format!("baseline '{baseline_id}' failed")));
    }
    let base = base.clone();
    let mut out = table.clone();
    for r in out.rows.iter_mut().filter(|r| r.is_ok()) {
        r.normalized = Some(Normalized {
            time: ratio(r.avg_epoch_ms, base.avg_epoch_ms),
            memory: ratio(r.avg_peak_bytes, base.avg_peak_bytes),
            sst_acc: ratio(r.sst_acc, base.sst_acc),
            para_acc: ratio(r.para_acc, base.para_acc),
            sts_pearson: ratio(r.sts_pearson, base.sts_pearson),
            overall: ratio(r.overall, base.overall),
        });
    }
    Ok(out)
}

/// The 12-cell ablation: AMP off/on by adapter mode none/attn/attn-only by
/// LoRA/DoRA at rank 1. The none+DoRA cells are reported as infeasible.
/// Normalized against the AMP-off, no-adapter cell.
pub fn ablation_suite(ctx: &BenchContext, parallelism: usize) -> Result<BenchTable> {
    let b = &ctx.base;
    let mut cells = Vec::new();
    for amp in [false, true] {
        for mode in [AdapterMode::None, AdapterMode::Attn, AdapterMode::AttnOnly] {
            for dora in [false, true] {
                cells.push(BenchConfig::new(
                    amp,
                    mode,
                    1,
                    dora,
                    b.fine_tune_mode,
                    b.batch_size,
                    b.optim.lr,
                    b.epochs,
                    b.seed,
                ));
            }
        }
    }
    let baseline = cells[0].id.clone();
    let table = run_grid(ctx, &cells, parallelism);
    normalize(&table, &baseline)
}

/// Train a fixed adapter mode at each rank for each seed. Runs are ordered
/// seed-major so that slow drift in machine load spreads across ranks.
pub fn rank_sweep(ctx: &BenchContext, mode: AdapterMode, dora: bool, ranks: &[usize], seeds: &[u64]) -> BenchTable {
    let b = &ctx.base;
    let mut configs = Vec::new();
    for &seed in seeds {
        for &rank in ranks {
            configs.push(BenchConfig::new(b.amp, mode, rank, dora, b.fine_tune_mode, b.batch_size, b.optim.lr, b.epochs, seed));
        }
    }
    run_grid(ctx, &configs, 1)
}

/// Baseline against LoRA+AMP and DoRA+AMP in all-lin mode at rank 1, over seeds.
pub fn final_model_ab(ctx: &BenchContext, seeds: &[u64], parallelism: usize) -> BenchTable {
    let b = &ctx.base;
    let mut configs = Vec::new();
    for &seed in seeds {
        let mk = |amp, mode, dora| BenchConfig::new(amp, mode, 1, dora, b.fine_tune_mode, b.batch_size, b.optim.lr, b.epochs, seed);
        configs.push(mk(false, AdapterMode::None, false));
        configs.push(mk(true, AdapterMode::AllLin, false));
        configs.push(mk(true, AdapterMode::AllLin, true));
    }
    run_grid(ctx, &configs, parallelism)
}

pub const CSV_COLUMNS: [&str; 24] = [
    "config_id",
    "amp",
    "mode",
    "rank",
    "dora",
    "fine_tune_mode",
    "batch_size",
    "lr",
    "task",
    "avg_epoch_ms",
    "avg_peak_bytes",
    "sst_acc",
    "para_acc",
    "sts_pearson",
    "overall",
    "normalized_time",
    "normalized_memory",
    "normalized_sst_acc",
    "normalized_para_acc",
    "normalized_sts_pearson",
    "normalized_overall",
    "trainable_params",
    "avg_activation_bytes",
    "status",
];

pub fn table_csv(table: &BenchTable) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(CSV_COLUMNS)?;
    let f = |x: f64| format!("{x:.6}");
    for r in &table.rows {
        let c = &r.config;
        let n = r.normalized;
        let nf = |g: fn(&Normalized) -> f64| n.as_ref().map(|n| f(g(n))).unwrap_or_default();
        let status = match &r.status {
            RunStatus::Ok => "ok".to_string(),
            RunStatus::Failed(reason) => format!("failed: {reason}"),
        };
        wr.write_record([
            c.id.clone(),
            c.amp.to_string(),
            c.mode.to_string(),
            c.rank.to_string(),
            c.dora.to_string(),
            c.fine_tune_mode.as_str().to_string(),
            c.batch_size.to_string(),
            format!("{:e}", c.lr),
            r.task.clone(),
            format!("{:.3}", r.avg_epoch_ms),
            format!("{:.1}", r.avg_peak_bytes),
            f(r.sst_acc),
            f(r.para_acc),
            f(r.sts_pearson),
            f(r.overall),
            nf(|n| n.time),
            nf(|n| n.memory),
            nf(|n| n.sst_acc),
            nf(|n| n.para_acc),
            nf(|n| n.sts_pearson),
            nf(|n| n.overall),
            r.trainable_params.to_string(),
            format!("{:.1}", r.avg_activation_bytes),
            status,
        ])?;
    }
    let bytes = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Best successful config per metric. Ties go to the earliest row.
pub fn summary(table: &BenchTable) -> String {
    let ok: Vec<&BenchRow> = table.rows.iter().filter(|r| r.is_ok()).collect();
    let failed = table.rows.len() - ok.len();
    let mut s = format!("runs: {} ok, {} failed\n", ok.len(), failed);
    let best = |key: fn(&BenchRow) -> f64, higher: bool| -> Option<&BenchRow> {
        ok.iter().copied().fold(None, |acc: Option<&BenchRow>, r| match acc {
            None => Some(r),
            Some(a) if (higher && key(r) > key(a)) || (!higher && key(r) < key(a)) => Some(r),
            keep => keep,
        })
    };
    let metrics: [(&str, fn(&BenchRow) -> f64, bool); 6] = [
        ("overall", |r| r.overall, true),
        ("sst_acc", |r| r.sst_acc, true),
        ("para_acc", |r| r.para_acc, true),
        ("sts_pearson", |r| r.sts_pearson, true),
        ("avg_epoch_ms", |r| r.avg_epoch_ms, false),
        ("avg_peak_bytes", |r| r.avg_peak_bytes, false),
    ];
    for (name, key, higher) in metrics {
        if let Some(r) = best(key, higher) {
            let _ = writeln!(s, "best {name}: {} ({:.6})", r.config.id, key(r));
        }
    }
    s
}

/// Write `path` (CSV) and `path` with a `.summary.txt` suffix.
pub fn emit_report(table: &BenchTable, path: &Path) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::Config("cannot report an empty table".into()));
    }
    std::fs::write(path, table_csv(table)?)?;
    let text = summary(table);
    let mut sp = path.as_os_str().to_owned();
    sp.push(".summary.txt");
    std::fs::write(Path::new(&sp), &text)?;
    Ok(text)
}
