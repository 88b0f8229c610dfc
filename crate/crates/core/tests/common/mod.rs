#![allow(dead_code)]

use minbert_peft::data::{split, synth_tasks, SynthSizes, TaskData};
use minbert_peft::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Train/dev split of synthetic tasks with `n` examples per task.
pub fn desk_data(seed: u64, n: usize) -> (TaskData, TaskData) {
    let all = synth_tasks(seed, SynthSizes { sst: n, para: n, sts: n }).unwrap();
    let (train, dev, _) = split(&all, seed);
    (train, dev)
}

/// `|a - b| / |b|` over whole vectors.
pub fn norm_rel(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    (num / den.max(1e-300)).sqrt()
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Largest relative gap between engine gradients of `w * engine(inputs)` and
/// central differences of the f64 `oracle`. Also fails on a forward mismatch.
pub fn grad_check(
    inputs: &[(Vec<f32>, Vec<usize>)],
    engine: impl Fn(&[Tensor]) -> Tensor,
    oracle: impl Fn(&[Vec<f64>]) -> f64,
    seed: u64,
) -> Result<f64, String> {
    let w = rng(seed).random_range(0.5f32..1.5);
    let ts: Vec<Tensor> = inputs.iter().map(|(v, s)| Tensor::param(v.clone(), s).unwrap()).collect();
    let out = engine(&ts);
    if out.numel() != 1 {
        return Err(format!("engine output has {} elements", out.numel()));
    }
    out.mul_scalar(w).backward().map_err(|e| e.to_string())?;

    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.iter().map(|&x| x as f64).collect()).collect();
    let f0 = oracle(&base);
    let e0 = out.item() as f64;
    if (e0 - f0).abs() > 1e-4 * f0.abs().max(1.0) {
        return Err(format!("forward {e0} vs oracle {f0}"));
    }
    let mut worst = 0.0f64;
    for (ti, t) in ts.iter().enumerate() {
        let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let mut plus = base.clone();
            plus[ti][j] += FD_STEP;
            let mut minus = base.clone();
            minus[ti][j] -= FD_STEP;
            let fd = w as f64 * (oracle(&plus) - oracle(&minus)) / (2.0 * FD_STEP);
            let an = g[j] as f64;
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-2);
            if !rel.is_finite() {
                return Err(format!("input {ti} elem {j}: analytic {an} fd {fd}"));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

// f64 reference formulas shared by the gradient checks.

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_softmax_rows(z: &[f64], c: usize) -> Vec<f64> {
    z.chunks(c)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect()
}

pub fn softmax_rows(z: &[f64], c: usize) -> Vec<f64> {
    log_softmax_rows(z, c).into_iter().map(f64::exp).collect()
}

pub fn pearson64(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}
