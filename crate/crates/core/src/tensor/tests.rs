use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const H: f64 = 1e-3;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Compare engine gradients of `sum(w * f(inputs))` against central
/// differences of an f64 reimplementation of `f`.
fn grad_check(
    inputs: &[(Vec<f32>, Vec<usize>)],
    engine: impl Fn(&[Tensor]) -> Tensor,
    oracle: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts: Vec<Tensor> = inputs
        .iter()
        .map(|(v, s)| Tensor::param(v.clone(), s).unwrap())
        .collect();
    let out = engine(&ts);
    let w = rand_vec(&mut rng, out.numel(), -1.0, 1.0);
    let wt = Tensor::new(w.clone(), out.shape()).unwrap();
    out.mul(&wt).unwrap().sum().backward().unwrap();

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(v, _)| v.iter().map(|&x| x as f64).collect())
        .collect();
    let loss = |xs: &[Vec<f64>]| -> f64 {
        oracle(xs).iter().zip(&w).map(|(a, &b)| a * b as f64).sum()
    };
    let oracle_out = oracle(&base);
    let engine_out = out.to_vec();
    assert_eq!(oracle_out.len(), engine_out.len(), "oracle output length");
    for (a, b) in engine_out.iter().zip(&oracle_out) {
        assert!(
            (*a as f64 - b).abs() <= 1e-4 * b.abs().max(1.0),
            "forward mismatch {} vs {}",
            a,
            b
        );
    }
    for (ti, t) in ts.iter().enumerate() {
        let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let mut plus = base.clone();
            plus[ti][j] += H;
            let mut minus = base.clone();
            minus[ti][j] -= H;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let an = g[j] as f64;
            let denom = fd.abs().max(an.abs()).max(1e-2);
            assert!(
                (an - fd).abs() / denom < 1e-4,
                "input {} elem {}: analytic {} vs fd {}",
                ti,
                j,
                an,
                fd
            );
        }
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn matmul_example() {
    let a = Tensor::new(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
    let b = Tensor::new(vec![1., 1.], &[2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.to_vec(), vec![3., 7.]);
}

#[test]
fn softmax_uniform() {
    let t = Tensor::zeros(&[5]);
    for v in t.softmax().unwrap().to_vec() {
        assert!((v - 0.2).abs() < 1e-7);
    }
}

#[test]
fn conv1d_output_shape_matches_hidden_minus_two() {
    let x = Tensor::zeros(&[2, 1, 768]);
    let w = Tensor::zeros(&[4, 1, 3]);
    let b = Tensor::zeros(&[4]);
    let y = x.conv1d(&w, Some(&b)).unwrap();
    assert_eq!(y.shape(), &[2, 4, 766]);
}

#[test]
fn sum_of_squares_gradient() {
    let x = Tensor::param(vec![1., 2., 3.], &[3]).unwrap();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2., 4., 6.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::param(vec![1., 2.], &[2]).unwrap();
    let y = x.mul_scalar(2.0);
    assert!(matches!(y.backward(), Err(crate::error::Error::Autograd(_))));
}

#[test]
fn grads_accumulate_until_zeroed() {
    let x = Tensor::param(vec![1., -2.], &[2]).unwrap();
    x.sum().backward().unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2., 2.]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn shape_errors_are_descriptive() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 5]);
    let e = a.matmul(&b).unwrap_err().to_string();
    assert!(e.contains("inner dims"), "{}", e);
    let e = a.add(&Tensor::zeros(&[4])).unwrap_err().to_string();
    assert!(e.contains("broadcast"), "{}", e);
}

#[test]
fn domain_errors() {
    let t = Tensor::new(vec![1.0, -1.0], &[2]).unwrap();
    assert!(matches!(t.log(), Err(crate::error::Error::Domain { .. })));
    assert!(matches!(t.sqrt(), Err(crate::error::Error::Domain { .. })));
}

#[test]
fn cast_rounds_to_nearest_half() {
    let t = Tensor::new(vec![1.000_244_3, 65504.0, 1e-8, -0.1], &[4]).unwrap();
    let h = t.cast(DType::F16E);
    let v = h.to_vec();
    assert_eq!(v[0], 1.0);
    assert_eq!(v[1], 65504.0);
    // 1e-8 is below the smallest subnormal half (about 6e-8) and flushes to 0.
    assert_eq!(v[2], 0.0);
    // Oracle: nearest binary16 to -0.1 is -0.0999755859375.
    assert_eq!(v[3], -0.099_975_586);
    assert_eq!(h.cast(DType::F16E).to_vec(), v);
    assert_eq!(h.data_bytes(), 8);
    assert_eq!(t.data_bytes(), 16);
}

#[test]
fn half_rounding_matches_bit_level_oracle() {
    // Independent rounding: 1 + k * 2^-10 are the representable neighbours of 1.
    let ulp = 2f32.powi(-10);
    for k in 0..8 {
        let lo = 1.0 + k as f32 * ulp;
        let below_mid = lo + 0.49 * ulp;
        let above_mid = lo + 0.51 * ulp;
        assert_eq!(quantize_f16(below_mid), lo);
        assert_eq!(quantize_f16(above_mid), lo + ulp);
    }
}

#[test]
fn linearity_under_power_of_two_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_vec(&mut rng, 12, -1.0, 1.0);
    let wv = rand_vec(&mut rng, 12, -1.0, 1.0);
    let run = |scale: f32| {
        let x = Tensor::param(xv.clone(), &[3, 4]).unwrap();
        let w = Tensor::param(wv.clone(), &[4, 3]).unwrap();
        let y = x.matmul(&w).unwrap().tanh().softmax().unwrap().log().unwrap();
        let l = y.mean().mul_scalar(scale);
        l.backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (gx, gw) = run(1.0);
    let (sx, sw) = run(1024.0);
    for (a, b) in gx.iter().zip(&sx).chain(gw.iter().zip(&sw)) {
        assert_eq!(a * 1024.0, *b);
    }
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = no_grad(|| x.mul_scalar(3.0));
    assert!(!y.requires_grad());
    assert!(y.is_leaf());
}

#[test]
fn autocast_matmul_outputs_half() {
    let a = Tensor::new(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]).unwrap();
    let y = autocast(true, || a.matmul(&a).unwrap());
    assert_eq!(y.dtype(), DType::F16E);
    for v in y.to_vec() {
        assert_eq!(quantize_f16(v), v);
    }
    // Softmax always returns full precision.
    let s = autocast(true, || y.softmax().unwrap());
    assert_eq!(s.dtype(), DType::F32);
}

#[test]
fn batchnorm_updates_running_stats() {
    let x = Tensor::new(vec![1., 2., 3., 4., 5., 6.], &[3, 2]).unwrap();
    let g = Tensor::full(&[2], 1.0);
    let b = Tensor::zeros(&[2]);
    let rm = Tensor::zeros(&[2]);
    let rv = Tensor::full(&[2], 1.0);
    x.batch_norm(&g, &b, &rm, &rv, true, 0.1, 1e-5).unwrap();
    let m = rm.to_vec();
    assert!((m[0] - 0.3).abs() < 1e-6 && (m[1] - 0.4).abs() < 1e-6);
    // unbiased variance of [1,3,5] is 4.
    let v = rv.to_vec();
    assert!((v[0] - (0.9 + 0.4)).abs() < 1e-6);
}

#[test]
fn grad_elementwise_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..3u64 {
        let x = rand_vec(&mut rng, 7, -2.0, 2.0);
        let pos: Vec<f32> = rand_vec(&mut rng, 7, 0.5, 3.0);
        let s = vec![7];
        grad_check(&[(x.clone(), s.clone())], |t| t[0].sigmoid(), |v| v[0].iter().map(|&a| sig(a)).collect(), case);
        grad_check(&[(x.clone(), s.clone())], |t| t[0].tanh(), |v| v[0].iter().map(|a| a.tanh()).collect(), case);
        grad_check(&[(x.clone(), s.clone())], |t| t[0].exp(), |v| v[0].iter().map(|a| a.exp()).collect(), case);
        grad_check(
            &[(x.clone(), s.clone())],
            |t| t[0].softplus(),
            |v| v[0].iter().map(|a| (1.0 + a.exp()).ln()).collect(),
            case,
        );
        grad_check(
            &[(x.clone(), s.clone())],
            |t| t[0].gelu(),
            |v| {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                v[0].iter().map(|&a| 0.5 * a * (1.0 + (c * (a + 0.044715 * a * a * a)).tanh())).collect()
            },
            case,
        );
        grad_check(&[(pos.clone(), s.clone())], |t| t[0].log().unwrap(), |v| v[0].iter().map(|a| a.ln()).collect(), case);
        grad_check(&[(pos.clone(), s.clone())], |t| t[0].sqrt().unwrap(), |v| v[0].iter().map(|a| a.sqrt()).collect(), case);
        grad_check(&[(x.clone(), s.clone())], |t| t[0].powi(3), |v| v[0].iter().map(|a| a * a * a).collect(), case);
        // Keep kinks of relu/abs/clamp away from the probe points.
        let away: Vec<f32> = x.iter().map(|&v| if v.abs() < 0.05 { v + 0.2 } else { v }).collect();
        grad_check(&[(away.clone(), s.clone())], |t| t[0].relu(), |v| v[0].iter().map(|a| a.max(0.0)).collect(), case);
        grad_check(&[(away.clone(), s.clone())], |t| t[0].abs(), |v| v[0].iter().map(|a| a.abs()).collect(), case);
        let cl: Vec<f32> = away.iter().map(|&v| if (v.abs() - 1.0).abs() < 0.05 { v * 0.8 } else { v }).collect();
        grad_check(&[(cl, s.clone())], |t| t[0].clamp(-1.0, 1.0), |v| v[0].iter().map(|a| a.clamp(-1.0, 1.0)).collect(), case);
    }
}

#[test]
fn grad_broadcast_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_vec(&mut rng, 12, -1.0, 1.0);
    let b = rand_vec(&mut rng, 4, 0.5, 2.0);
    let c = rand_vec(&mut rng, 3, 0.5, 2.0);
    // [3,4] op [4]
    let row = |f: fn(f64, f64) -> f64| {
        move |v: &[Vec<f64>]| (0..12).map(|i| f(v[0][i], v[1][i % 4])).collect::<Vec<f64>>()
    };
    grad_check(&[(a.clone(), vec![3, 4]), (b.clone(), vec![4])], |t| t[0].add(&t[1]).unwrap(), row(|x, y| x + y), 1);
    grad_check(&[(a.clone(), vec![3, 4]), (b.clone(), vec![4])], |t| t[0].sub(&t[1]).unwrap(), row(|x, y| x - y), 2);
    grad_check(&[(a.clone(), vec![3, 4]), (b.clone(), vec![4])], |t| t[0].mul(&t[1]).unwrap(), row(|x, y| x * y), 3);
    grad_check(&[(a.clone(), vec![3, 4]), (b.clone(), vec![4])], |t| t[0].div(&t[1]).unwrap(), row(|x, y| x / y), 4);
    // [3,4] op [3,1]
    let col = |f: fn(f64, f64) -> f64| {
        move |v: &[Vec<f64>]| (0..12).map(|i| f(v[0][i], v[1][i / 4])).collect::<Vec<f64>>()
    };
    grad_check(&[(a.clone(), vec![3, 4]), (c.clone(), vec![3, 1])], |t| t[0].mul(&t[1]).unwrap(), col(|x, y| x * y), 5);
    grad_check(&[(a.clone(), vec![3, 4]), (c.clone(), vec![3, 1])], |t| t[0].div(&t[1]).unwrap(), col(|x, y| x / y), 6);
    // [3,1] op [1,4] -> [3,4]
    grad_check(
        &[(c.clone(), vec![3, 1]), (b.clone(), vec![1, 4])],
        |t| t[0].mul(&t[1]).unwrap(),
        |v| (0..12).map(|i| v[0][i / 4] * v[1][i % 4]).collect(),
        7,
    );
    // scalar
    grad_check(
        &[(a.clone(), vec![3, 4]), (vec![0.7], vec![])],
        |t| t[0].sub(&t[1]).unwrap(),
        |v| v[0].iter().map(|x| x - v[1][0]).collect(),
        8,
    );
}

fn matmul_oracle(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

#[test]
fn grad_matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_vec(&mut rng, 6, -1.0, 1.0);
    let b = rand_vec(&mut rng, 12, -1.0, 1.0);
    grad_check(
        &[(a.clone(), vec![2, 3]), (b.clone(), vec![3, 4])],
        |t| t[0].matmul(&t[1]).unwrap(),
        |v| matmul_oracle(&v[0], &v[1], 2, 3, 4),
        1,
    );
    let a3 = rand_vec(&mut rng, 12, -1.0, 1.0);
    grad_check(
        &[(a3.clone(), vec![2, 2, 3]), (b.clone(), vec![3, 4])],
        |t| t[0].matmul(&t[1]).unwrap(),
        |v| {
            let mut out = matmul_oracle(&v[0][..6], &v[1], 2, 3, 4);
            out.extend(matmul_oracle(&v[0][6..], &v[1], 2, 3, 4));
            out
        },
        2,
    );
    let b3 = rand_vec(&mut rng, 24, -1.0, 1.0);
    grad_check(
        &[(a3.clone(), vec![2, 2, 3]), (b3.clone(), vec![2, 3, 4])],
        |t| t[0].matmul(&t[1]).unwrap(),
        |v| {
            let mut out = matmul_oracle(&v[0][..6], &v[1][..12], 2, 3, 4);
            out.extend(matmul_oracle(&v[0][6..], &v[1][12..], 2, 3, 4));
            out
        },
        3,
    );
}

#[test]
fn grad_matmul_nt() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_vec(&mut rng, 12, -1.0, 1.0);
    let w = rand_vec(&mut rng, 15, -1.0, 1.0);
    grad_check(
        &[(a, vec![2, 2, 3]), (w, vec![5, 3])],
        |t| t[0].matmul_nt(&t[1]).unwrap(),
        |v| {
            let wt: Vec<f64> = (0..15).map(|i| v[1][(i % 5) * 3 + i / 5]).collect();
            matmul_oracle(&v[0], &wt, 4, 3, 5)
        },
        1,
    );
}

#[test]
fn grad_softmax_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_vec(&mut rng, 10, -2.0, 2.0);
    let soft = |v: &[f64]| -> Vec<f64> {
        let mut out = Vec::new();
        for row in v.chunks(5) {
            let s: f64 = row.iter().map(|a| a.exp()).sum();
            out.extend(row.iter().map(|a| a.exp() / s));
        }
        out
    };
    grad_check(&[(x.clone(), vec![2, 5])], |t| t[0].softmax().unwrap(), |v| soft(&v[0]), 1);
    grad_check(
        &[(x.clone(), vec![2, 5])],
        |t| t[0].log_softmax().unwrap(),
        |v| soft(&v[0]).iter().map(|p| p.ln()).collect(),
        2,
    );
}

#[test]
fn grad_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_vec(&mut rng, 24, -1.0, 1.0);
    let s = vec![2, 3, 4];
    grad_check(&[(x.clone(), s.clone())], |t| t[0].sum(), |v| vec![v[0].iter().sum()], 1);
    grad_check(&[(x.clone(), s.clone())], |t| t[0].mean(), |v| vec![v[0].iter().sum::<f64>() / 24.0], 2);
    grad_check(
        &[(x.clone(), s.clone())],
        |t| t[0].sum_dim(1, false).unwrap(),
        |v| {
            let mut out = vec![0.0; 8];
            for o in 0..2 {
                for l in 0..3 {
                    for i in 0..4 {
                        out[o * 4 + i] += v[0][(o * 3 + l) * 4 + i];
                    }
                }
            }
            out
        },
        3,
    );
    grad_check(
        &[(x.clone(), s.clone())],
        |t| t[0].mean_dim(-1, true).unwrap(),
        |v| v[0].chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect(),
        4,
    );
    // Distinct values spaced well beyond the probe step so the argmax is stable.
    let mut spaced: Vec<f32> = (0..24).map(|i| i as f32 * 0.1 - 1.2).collect();
    for i in (1..24).rev() {
        spaced.swap(i, rng.random_range(0..=i));
    }
    grad_check(
        &[(spaced, s.clone())],
        |t| t[0].max_dim(2, false).unwrap(),
        |v| v[0].chunks(4).map(|c| c.iter().copied().fold(f64::MIN, f64::max)).collect(),
        5,
    );
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_vec(&mut rng, 24, -1.0, 1.0);
    let y = rand_vec(&mut rng, 8, -1.0, 1.0);
    grad_check(
        &[(x.clone(), vec![2, 3, 4])],
        |t| t[0].permute(&[2, 0, 1]).unwrap(),
        |v| {
            let mut out = Vec::new();
            for i in 0..4 {
                for a in 0..2 {
                    for b in 0..3 {
                        out.push(v[0][(a * 3 + b) * 4 + i]);
                    }
                }
            }
            out
        },
        1,
    );
    grad_check(
        &[(x.clone(), vec![2, 3, 4])],
        |t| t[0].narrow(1, 1, 2).unwrap(),
        |v| {
            let mut out = Vec::new();
            for a in 0..2 {
                for b in 1..3 {
                    for i in 0..4 {
                        out.push(v[0][(a * 3 + b) * 4 + i]);
                    }
                }
            }
            out
        },
        2,
    );
    grad_check(
        &[(x.clone(), vec![2, 3, 4]), (y.clone(), vec![2, 1, 4])],
        |t| concat(&[&t[0], &t[1]], 1).unwrap(),
        |v| {
            let mut out = Vec::new();
            for a in 0..2 {
                out.extend_from_slice(&v[0][a * 12..(a + 1) * 12]);
                out.extend_from_slice(&v[1][a * 4..(a + 1) * 4]);
            }
            out
        },
        3,
    );
    grad_check(&[(x.clone(), vec![2, 3, 4])], |t| t[0].reshape(&[6, 4]).unwrap().tanh(), |v| v[0].iter().map(|a| a.tanh()).collect(), 4);
}

fn ln_oracle(x: &[f64], g: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in x.chunks(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.push((row[j] - mu) / (var + 1e-5).sqrt() * g[j] + b[j]);
        }
    }
    out
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..3 {
        let x = rand_vec(&mut rng, 15, -2.0, 2.0);
        let g = rand_vec(&mut rng, 5, 0.5, 1.5);
        let b = rand_vec(&mut rng, 5, -0.5, 0.5);
        grad_check(
            &[(x, vec![3, 5]), (g, vec![5]), (b, vec![5])],
            |t| t[0].layer_norm(&t[1], &t[2], 1e-5).unwrap(),
            |v| ln_oracle(&v[0], &v[1], &v[2], 5),
            case,
        );
    }
}

#[test]
fn grad_batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = rand_vec(&mut rng, 24, -2.0, 2.0);
    let g = rand_vec(&mut rng, 3, 0.5, 1.5);
    let b = rand_vec(&mut rng, 3, -0.5, 0.5);
    // [N=2, C=3, L=4], statistics over N and L.
    let oracle = |v: &[Vec<f64>]| -> Vec<f64> {
        let (n, c, l) = (2, 3, 4);
        let mut out = vec![0.0; 24];
        for ci in 0..c {
            let idx: Vec<usize> = (0..n).flat_map(|ni| (0..l).map(move |li| (ni * c + ci) * l + li)).collect();
            let mu = idx.iter().map(|&i| v[0][i]).sum::<f64>() / idx.len() as f64;
            let var = idx.iter().map(|&i| (v[0][i] - mu).powi(2)).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                out[i] = (v[0][i] - mu) / (var + 1e-5).sqrt() * v[1][ci] + v[2][ci];
            }
        }
        out
    };
    grad_check(
        &[(x.clone(), vec![2, 3, 4]), (g.clone(), vec![3]), (b.clone(), vec![3])],
        |t| {
            let rm = Tensor::zeros(&[3]);
            let rv = Tensor::full(&[3], 1.0);
            t[0].batch_norm(&t[1], &t[2], &rm, &rv, true, 0.1, 1e-5).unwrap()
        },
        oracle,
        1,
    );
    let rmv = vec![0.1f32, -0.2, 0.3];
    let rvv = vec![0.5f32, 1.5, 2.0];
    let (rm2, rv2) = (rmv.clone(), rvv.clone());
    grad_check(
        &[(x[..6].to_vec(), vec![2, 3]), (g, vec![3]), (b, vec![3])],
        move |t| {
            let rm = Tensor::new(rmv.clone(), &[3]).unwrap();
            let rv = Tensor::new(rvv.clone(), &[3]).unwrap();
            t[0].batch_norm(&t[1], &t[2], &rm, &rv, false, 0.1, 1e-5).unwrap()
        },
        move |v| {
            (0..6)
                .map(|i| {
                    let c = i % 3;
                    (v[0][i] - rm2[c] as f64) / (rv2[c] as f64 + 1e-5).sqrt() * v[1][c] + v[2][c]
                })
                .collect()
        },
        2,
    );
}

#[test]
fn grad_conv1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, cin, l, cout, k) = (2, 2, 6, 3, 3);
    let x = rand_vec(&mut rng, n * cin * l, -1.0, 1.0);
    let w = rand_vec(&mut rng, cout * cin * k, -1.0, 1.0);
    let b = rand_vec(&mut rng, cout, -1.0, 1.0);
    let lo = l - k + 1;
    grad_check(
        &[(x, vec![n, cin, l]), (w, vec![cout, cin, k]), (b, vec![cout])],
        |t| t[0].conv1d(&t[1], Some(&t[2])).unwrap(),
        |v| {
            let mut out = vec![0.0; n * cout * lo];
            for ni in 0..n {
                for co in 0..cout {
                    for t in 0..lo {
                        let mut s = v[2][co];
                        for ci in 0..cin {
                            for kk in 0..k {
                                s += v[1][(co * cin + ci) * k + kk] * v[0][(ni * cin + ci) * l + t + kk];
                            }
                        }
                        out[(ni * cout + co) * lo + t] = s;
                    }
                }
            }
            out
        },
        1,
    );
}

#[test]
fn grad_embedding_with_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let w = rand_vec(&mut rng, 12, -1.0, 1.0);
    let ids = vec![2usize, 0, 2, 1];
    let ids2 = ids.clone();
    grad_check(
        &[(w, vec![4, 3])],
        move |t| t[0].embedding(&ids, &[2, 2]).unwrap(),
        move |v| ids2.iter().flat_map(|&i| v[0][i * 3..i * 3 + 3].to_vec()).collect(),
        1,
    );
}

#[test]
fn grad_composite_graph() {
    // A small attention-like graph with shared inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_vec(&mut rng, 6, -1.0, 1.0);
    let w = rand_vec(&mut rng, 9, -1.0, 1.0);
    grad_check(
        &[(x, vec![2, 3]), (w, vec![3, 3])],
        |t| {
            let q = t[0].matmul(&t[1]).unwrap();
            let s = q.matmul(&t[0].transpose(0, 1).unwrap()).unwrap().softmax().unwrap();
            s.matmul(&t[0]).unwrap().add(&t[0]).unwrap()
        },
        |v| {
            let q = matmul_oracle(&v[0], &v[1], 2, 3, 3);
            let xt: Vec<f64> = (0..6).map(|i| v[0][(i % 2) * 3 + i / 2]).collect();
            let sc = matmul_oracle(&q, &xt, 2, 3, 2);
            let mut p = Vec::new();
            for row in sc.chunks(2) {
                let z: f64 = row.iter().map(|a| a.exp()).sum();
                p.extend(row.iter().map(|a| a.exp() / z));
            }
            let o = matmul_oracle(&p, &v[0], 2, 2, 3);
            o.iter().zip(&v[0]).map(|(a, b)| a + b).collect()
        },
        1,
    );
}

#[test]
fn memory_ledger_tracks_tensor_lifetimes() {
    let ledger = std::sync::Arc::new(memory::MemoryLedger::new());
    memory::with_ledger(ledger.clone(), || {
        let before = memory::live_bytes();
        {
            let t = Tensor::zeros(&[1000]);
            assert_eq!(memory::live_bytes(), before + 4000);
            drop(t);
        }
        assert_eq!(memory::live_bytes(), before);
        memory::reset_peak();
        assert_eq!(memory::peak_bytes(), memory::live_bytes());
    });
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in proptest::collection::vec(-8.0f32..8.0, 1..40), cols in 1usize..8) {
        let rows = v.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(v[..rows * cols].to_vec(), &[rows, cols]).unwrap();
        let s = t.softmax().unwrap().to_vec();
        for row in s.chunks(cols) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            for &p in row {
                prop_assert!((p > 0.0 && p < 1.0) || cols == 1);
            }
        }
    }

    #[test]
    fn cast_is_idempotent(v in proptest::collection::vec(-70000.0f32..70000.0, 1..32)) {
        let n = v.len();
        let t = Tensor::new(v, &[n]).unwrap();
        let once = t.cast(DType::F16E);
        let twice = once.cast(DType::F32).cast(DType::F16E);
        prop_assert_eq!(once.to_vec(), twice.to_vec());
        for x in once.to_vec() {
            prop_assert!(quantize_f16(x) == x || x.is_infinite());
        }
    }

    #[test]
    fn peak_is_monotone_between_resets(sizes in proptest::collection::vec(1usize..500, 1..20)) {
        let ledger = std::sync::Arc::new(memory::MemoryLedger::new());
        memory::with_ledger(ledger.clone(), || {
            let mut last = memory::peak_bytes();
            let mut keep = Vec::new();
            for (i, s) in sizes.iter().enumerate() {
                let t = Tensor::zeros(&[*s]);
                if i % 2 == 0 { keep.push(t); }
                let p = memory::peak_bytes();
                assert!(p >= last);
                assert!(p >= memory::live_bytes());
                last = p;
            }
            drop(keep);
            assert_eq!(memory::live_bytes(), 0);
        });
    }
}
