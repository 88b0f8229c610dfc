//! Differentiable operations. Every op validates shapes up front, computes its
//! result eagerly and, when an input requires grad, records a backward closure.

use std::sync::Arc;

use rand::Rng;

use super::memory::Buffer;
use super::{autocast_enabled, DType, Tensor};
use crate::error::{shape_err, Error, Result};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn join_dtype(a: DType, b: DType) -> DType {
    if a == DType::F16E && b == DType::F16E {
        DType::F16E
    } else {
        DType::F32
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return shape_err(
                    op,
                    format!("cannot broadcast {:?} with {:?} (dim {} is {} vs {})", a, b, i, da, db),
                )
            }
        };
    }
    Ok(out)
}

/// Maps an output flat index to the flat index of a broadcast input.
#[derive(Clone)]
enum BMap {
    Same,
    Scalar,
    Suffix(usize),
    General(Arc<Vec<usize>>),
}

impl BMap {
    fn build(input: &[usize], out: &[usize]) -> BMap {
        let n_in = numel(input);
        if input == out {
            return BMap::Same;
        }
        if n_in == 1 {
            return BMap::Scalar;
        }
        let trimmed: Vec<usize> = {
            let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
            input[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BMap::Suffix(n_in);
        }
        let r = out.len();
        let mut padded = vec![1; r - input.len()];
        padded.extend_from_slice(input);
        let mut in_strides = vec![0usize; r];
        let mut s = 1;
        for d in (0..r).rev() {
            in_strides[d] = if padded[d] == 1 { 0 } else { s };
            s *= padded[d];
        }
        let total = numel(out);
        let mut idx = vec![0usize; r];
        let mut map = Vec::with_capacity(total);
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += in_strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= in_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        BMap::General(Arc::new(map))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BMap::Same => i,
            BMap::Scalar => 0,
            BMap::Suffix(n) => i % n,
            BMap::General(m) => m[i],
        }
    }

    fn reduce(&self, full: Vec<f32>, in_len: usize) -> Vec<f32> {
        if let BMap::Same = self {
            return full;
        }
        let mut out = vec![0.0; in_len];
        for (i, g) in full.iter().enumerate() {
            out[self.at(i)] += *g;
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(name: &'static str, kind: Bin, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let ma = BMap::build(a.shape(), &out_shape);
    let mb = BMap::build(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let f = match kind {
        Bin::Add => |x: f32, y: f32| x + y,
        Bin::Sub => |x: f32, y: f32| x - y,
        Bin::Mul => |x: f32, y: f32| x * y,
        Bin::Div => |x: f32, y: f32| x / y,
    };
    let values = a.with_data(|av| {
        b.with_data(|bv| match (&ma, &mb) {
            (BMap::Same, BMap::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (BMap::Same, BMap::Scalar) => av.iter().map(|&x| f(x, bv[0])).collect(),
            _ => (0..n).map(|i| f(av[ma.at(i)], bv[mb.at(i)])).collect::<Vec<f32>>(),
        })
    });
    let dtype = join_dtype(a.dtype(), b.dtype());
    let (ta, tb) = (a.clone(), b.clone());
    let (na, nb) = (a.numel(), b.numel());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(name, values, out_shape, dtype, vec![a.clone(), b.clone()], move |g, _| {
        let ga = need_a.then(|| {
            let full: Vec<f32> = match kind {
                Bin::Add | Bin::Sub => g.to_vec(),
                Bin::Mul => tb.with_data(|bv| (0..g.len()).map(|i| g[i] * bv[mb.at(i)]).collect()),
                Bin::Div => tb.with_data(|bv| (0..g.len()).map(|i| g[i] / bv[mb.at(i)]).collect()),
            };
            ma.reduce(full, na)
        });
        let gb = need_b.then(|| {
            let full: Vec<f32> = match kind {
                Bin::Add => g.to_vec(),
                Bin::Sub => g.iter().map(|x| -x).collect(),
                Bin::Mul => ta.with_data(|av| (0..g.len()).map(|i| g[i] * av[ma.at(i)]).collect()),
                Bin::Div => ta.with_data(|av| {
                    tb.with_data(|bv| {
                        (0..g.len())
                            .map(|i| {
                                let y = bv[mb.at(i)];
                                -g[i] * av[ma.at(i)] / (y * y)
                            })
                            .collect()
                    })
                }),
            };
            mb.reduce(full, nb)
        });
        vec![ga, gb]
    }))
}

/// Elementwise map whose derivative is expressed through input `x` and output `y`.
fn unary(
    name: &'static str,
    t: &Tensor,
    dtype: DType,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
) -> Tensor {
    let values: Vec<f32> = t.with_data(|v| v.iter().map(|&x| f(x)).collect());
    let input = t.clone();
    Tensor::from_op(name, values, t.shape().to_vec(), dtype, vec![t.clone()], move |g, y| {
        let gx = input.with_data(|xv| {
            g.iter()
                .zip(xv.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect()
        });
        vec![Some(gx)]
    })
}

fn sigmoid_f(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn normalize_dim(op: &'static str, dim: isize, ndim: usize) -> Result<usize> {
    let d = if dim < 0 { dim + ndim as isize } else { dim };
    if d < 0 || d as usize >= ndim.max(1) {
        return shape_err(op, format!("dim {} out of range for rank {}", dim, ndim));
    }
    Ok(d as usize)
}

/// `(outer, len, inner)` view of a shape around `dim`.
fn split3(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    (numel(&shape[..dim]), shape[dim], numel(&shape[dim + 1..]))
}

fn permute_copy(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let r = shape.len();
    let mut strides = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // Innermost output dim is walked with a fixed source stride.
    let last = r - 1;
    let inner_len = out_shape[last];
    let inner_stride = out_strides[last];
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    for _ in 0..total / inner_len {
        let mut off = base;
        for _ in 0..inner_len {
            out.push(data[off]);
            off += inner_stride;
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            base += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= out_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// Shared-batch matmul kernel: `[batch, n, k] x [batch|1, k, m] -> [batch, n, m]`.
fn matmul_kernel(a: &[f32], b: &[f32], batch: usize, n: usize, k: usize, m: usize, b_shared: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * n * m];
    for bi in 0..batch {
        let ab = &a[bi * n * k..(bi + 1) * n * k];
        let bb = if b_shared { b } else { &b[bi * k * m..(bi + 1) * k * m] };
        let ob = &mut out[bi * n * m..(bi + 1) * n * m];
        for i in 0..n {
            let orow = &mut ob[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ab[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bb[p * m..(p + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", Bin::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", Bin::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", Bin::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary("div", Bin::Div, self, other)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        unary("add_scalar", self, self.dtype(), |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f32) -> Tensor {
        unary("mul_scalar", self, self.dtype(), |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn powi(&self, p: i32) -> Tensor {
        unary(
            "powi",
            self,
            self.dtype(),
            |x| x.powi(p),
            move |x, _| p as f32 * x.powi(p - 1),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary("relu", self, self.dtype(), |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary("sigmoid", self, self.dtype(), sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        unary("tanh", self, self.dtype(), f32::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary(
            "gelu",
            self,
            self.dtype(),
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            },
        )
    }

    pub fn softplus(&self) -> Tensor {
        unary("softplus", self, DType::F32, softplus_f, |x, _| sigmoid_f(x))
    }

    pub fn exp(&self) -> Tensor {
        unary("exp", self, DType::F32, f32::exp, |_, y| y)
    }

    pub fn abs(&self) -> Tensor {
        unary("abs", self, self.dtype(), f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.with_data(|d| d.iter().copied().find(|&x| x < 0.0 || x.is_nan())) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("log of negative value {}", v),
            });
        }
        Ok(unary("log", self, DType::F32, f32::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.with_data(|d| d.iter().copied().find(|&x| x < 0.0 || x.is_nan())) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("sqrt of negative value {}", v),
            });
        }
        Ok(unary("sqrt", self, DType::F32, f32::sqrt, |_, y| 0.5 / y))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        unary("clamp", self, self.dtype(), move |x| x.clamp(lo, hi), move |x, _| {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Quantize to `dtype`. Gradient is the identity.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        let values = self.to_vec();
        Tensor::from_op("cast", values, self.shape().to_vec(), dtype, vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn sum(&self) -> Tensor {
        let s: f32 = self.with_data(|d| d.iter().sum());
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![], DType::F32, vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f32 = self.with_data(|d| d.iter().sum());
        let inv = 1.0 / n as f32;
        Tensor::from_op("mean", vec![s * inv], vec![], DType::F32, vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    fn reduce_shape(&self, dim: usize, keepdim: bool) -> Vec<usize> {
        let mut s = self.shape().to_vec();
        if keepdim {
            s[dim] = 1;
        } else {
            s.remove(dim);
        }
        s
    }

    pub fn sum_dim(&self, dim: isize, keepdim: bool) -> Result<Tensor> {
        let d = normalize_dim("sum_dim", dim, self.ndim())?;
        let (outer, len, inner) = split3(self.shape(), d);
        let values = self.with_data(|x| {
            let mut out = vec![0.0f32; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += *b;
                    }
                }
            }
            out
        });
        let shape = self.reduce_shape(d, keepdim);
        Ok(Tensor::from_op("sum_dim", values, shape, DType::F32, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_dim(&self, dim: isize, keepdim: bool) -> Result<Tensor> {
        let d = normalize_dim("mean_dim", dim, self.ndim())?;
        let len = self.shape()[d];
        Ok(self.sum_dim(dim, keepdim)?.mul_scalar(1.0 / len as f32))
    }

    /// Max along `dim`; the gradient goes to the first maximal element.
    pub fn max_dim(&self, dim: isize, keepdim: bool) -> Result<Tensor> {
        let d = normalize_dim("max_dim", dim, self.ndim())?;
        let (outer, len, inner) = split3(self.shape(), d);
        if len == 0 {
            return shape_err("max_dim", "reduction over an empty dim");
        }
        let (values, arg): (Vec<f32>, Vec<usize>) = self.with_data(|x| {
            let mut vals = vec![f32::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let v = x[(o * len + l) * inner + i];
                        let j = o * inner + i;
                        if v > vals[j] || l == 0 {
                            vals[j] = v;
                            arg[j] = l;
                        }
                    }
                }
            }
            (vals, arg)
        });
        let shape = self.reduce_shape(d, keepdim);
        Ok(Tensor::from_op("max_dim", values, shape, self.dtype(), vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let j = o * inner + i;
                    gx[(o * len + arg[j]) * inner + i] = g[j];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Copying reshape (element order preserved).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return shape_err(
                "reshape",
                format!("cannot reshape {:?} ({} elements) into {:?}", self.shape(), self.numel(), shape),
            );
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            self.dtype(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.ndim();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{:?} is not a permutation of rank {}", perm, r));
        }
        let shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let values = self.with_data(|d| permute_copy(d, &shape, perm));
        let mut inv = vec![0usize; r];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let oshape = out_shape.clone();
        Ok(Tensor::from_op("permute", values, out_shape, self.dtype(), vec![self.clone()], move |g, _| {
            vec![Some(permute_copy(g, &oshape, &inv))]
        }))
    }

    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor> {
        let r = self.ndim();
        if d0 >= r || d1 >= r {
            return shape_err("transpose", format!("dims ({}, {}) out of range for rank {}", d0, d1, r));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(d0, d1);
        self.permute(&perm)
    }

    /// `len` entries of `dim` starting at `start`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor> {
        if dim >= self.ndim() || start + len > self.shape()[dim] {
            return shape_err(
                "narrow",
                format!("range {}..{} on dim {} of {:?}", start, start + len, dim, self.shape()),
            );
        }
        let (outer, full, inner) = split3(self.shape(), dim);
        let values = self.with_data(|x| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
            out
        });
        let mut shape = self.shape().to_vec();
        shape[dim] = len;
        Ok(Tensor::from_op("narrow", values, shape, self.dtype(), vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0f32; outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Batched matrix product with autocast support.
    ///
    /// Accepts `[n,k] x [k,m]`, `[..., n, k] x [k, m]` and `[..., n, k] x [..., k, m]`
    /// with identical leading dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = if autocast_enabled() {
            (self.cast(DType::F16E), other.cast(DType::F16E))
        } else {
            (self.clone(), other.clone())
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("operands must be at least 2-D, got {:?} and {:?}", sa, sb));
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err("matmul", format!("inner dims differ: {:?} x {:?}", sa, sb));
        }
        let batch_dims = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if !b_shared && &sb[..sb.len() - 2] != batch_dims {
            return shape_err("matmul", format!("batch dims differ: {:?} x {:?}", sa, sb));
        }
        let batch = numel(batch_dims);
        let values = a.with_data(|av| b.with_data(|bv| matmul_kernel(av, bv, batch, n, k, m, b_shared)));
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([n, m]);
        let dtype = join_dtype(a.dtype(), b.dtype());
        let (ta, tb) = (a.clone(), b.clone());
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op("matmul", values, out_shape, dtype, vec![a, b], move |g, _| {
            let ga = need_a.then(|| {
                tb.with_data(|bv| {
                    let mut ga = vec![0.0f32; batch * n * k];
                    for bi in 0..batch {
                        let bb = if b_shared { bv } else { &bv[bi * k * m..(bi + 1) * k * m] };
                        for i in 0..n {
                            let grow = &g[(bi * n + i) * m..(bi * n + i + 1) * m];
                            for p in 0..k {
                                let brow = &bb[p * m..(p + 1) * m];
                                ga[(bi * n + i) * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    ga
                })
            });
            let gb = need_b.then(|| {
                ta.with_data(|av| {
                    let mut gb = vec![0.0f32; if b_shared { k * m } else { batch * k * m }];
                    for bi in 0..batch {
                        let off = if b_shared { 0 } else { bi * k * m };
                        for i in 0..n {
                            let grow = &g[(bi * n + i) * m..(bi * n + i + 1) * m];
                            for p in 0..k {
                                let x = av[(bi * n + i) * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[off + p * m..off + (p + 1) * m];
                                for (d, &gg) in dst.iter_mut().zip(grow) {
                                    *d += x * gg;
                                }
                            }
                        }
                    }
                    gb
                })
            });
            vec![ga, gb]
        }))
    }

    /// `self @ other^T` for a 2-D `other` of shape `[m, k]`; `self` is `[..., k]`.
    ///
    /// This is the linear-layer contraction against an `[out, in]` weight.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = if autocast_enabled() {
            (self.cast(DType::F16E), other.cast(DType::F16E))
        } else {
            (self.clone(), other.clone())
        };
        let sa = a.shape().to_vec();
        if sa.is_empty() || b.ndim() != 2 || b.dim(1) != sa[sa.len() - 1] {
            return shape_err("matmul_nt", format!("{:?} x {:?}^T", sa, b.shape()));
        }
        let k = sa[sa.len() - 1];
        let m = b.dim(0);
        let rows = numel(&sa[..sa.len() - 1]);
        let values = a.with_data(|av| {
            b.with_data(|bv| {
                let mut out = vec![0.0f32; rows * m];
                for i in 0..rows {
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..m {
                        let brow = &bv[j * k..(j + 1) * k];
                        out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                out
            })
        });
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(m);
        let dtype = join_dtype(a.dtype(), b.dtype());
        let (ta, tb) = (a.clone(), b.clone());
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op("matmul_nt", values, out_shape, dtype, vec![a, b], move |g, _| {
            let ga = need_a.then(|| {
                tb.with_data(|bv| {
                    let mut ga = vec![0.0f32; rows * k];
                    for i in 0..rows {
                        let dst = &mut ga[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gg = g[i * m + j];
                            if gg == 0.0 {
                                continue;
                            }
                            for (d, &y) in dst.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += gg * y;
                            }
                        }
                    }
                    ga
                })
            });
            let gb = need_b.then(|| {
                ta.with_data(|av| {
                    let mut gb = vec![0.0f32; m * k];
                    for i in 0..rows {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gg = g[i * m + j];
                            if gg == 0.0 {
                                continue;
                            }
                            for (d, &x) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += gg * x;
                            }
                        }
                    }
                    gb
                })
            });
            vec![ga, gb]
        }))
    }

    /// Softmax over the last dim.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = match self.shape().last() {
            Some(&d) if d > 0 => d,
            _ => return shape_err("softmax", "needs a non-empty last dim"),
        };
        let values = self.with_data(|x| {
            let mut out = vec![0.0f32; x.len()];
            for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut s = 0.0f32;
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - mx).exp();
                    s += *o;
                }
                let inv = 1.0 / s;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
            out
        });
        Ok(Tensor::from_op("softmax", values, self.shape().to_vec(), DType::F32, vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0f32; g.len()];
            for ((grow, yrow), xrow) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, &gg), &yy) in xrow.iter_mut().zip(grow).zip(yrow) {
                    *o = yy * (gg - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Log-softmax over the last dim.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let d = match self.shape().last() {
            Some(&d) if d > 0 => d,
            _ => return shape_err("log_softmax", "needs a non-empty last dim"),
        };
        let values = self.with_data(|x| {
            let mut out = vec![0.0f32; x.len()];
            for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f32>().ln();
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = v - lse;
                }
            }
            out
        });
        Ok(Tensor::from_op("log_softmax", values, self.shape().to_vec(), DType::F32, vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0f32; g.len()];
            for ((grow, yrow), xrow) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let s: f32 = grow.iter().sum();
                for ((o, &gg), &yy) in xrow.iter_mut().zip(grow).zip(yrow) {
                    *o = gg - yy.exp() * s;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer norm over the last dim with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return shape_err(
                "layer_norm",
                format!("input {:?} with gamma {:?}, beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            );
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0f32; self.numel()];
        let mut rstd = vec![0.0f32; rows];
        self.with_data(|x| {
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *h = (v - mu) * rs;
                }
            }
        });
        let values = gamma.with_data(|gv| {
            beta.with_data(|bv| {
                xhat.iter()
                    .enumerate()
                    .map(|(i, &h)| h * gv[i % d] + bv[i % d])
                    .collect::<Vec<f32>>()
            })
        });
        let need = [self.requires_grad(), gamma.requires_grad(), beta.requires_grad()];
        let saved = Buffer::new(xhat, DType::F32);
        let saved_rstd = Buffer::new(rstd, DType::F32);
        let tg = gamma.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            values,
            self.shape().to_vec(),
            DType::F32,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _| {
                let xh = saved.as_slice();
                let rs = saved_rstd.as_slice();
                let gx = need[0].then(|| {
                    tg.with_data(|gv| {
                        let mut gx = vec![0.0f32; g.len()];
                        for r in 0..rows {
                            let sl = r * d..(r + 1) * d;
                            let (gr, hr) = (&g[sl.clone()], &xh[sl.clone()]);
                            let mut m1 = 0.0f32;
                            let mut m2 = 0.0f32;
                            for j in 0..d {
                                let gh = gr[j] * gv[j];
                                m1 += gh;
                                m2 += gh * hr[j];
                            }
                            m1 /= d as f32;
                            m2 /= d as f32;
                            for j in 0..d {
                                gx[r * d + j] = rs[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                            }
                        }
                        gx
                    })
                });
                let ggamma = need[1].then(|| {
                    let mut out = vec![0.0f32; d];
                    for (i, (&gg, &h)) in g.iter().zip(xh).enumerate() {
                        out[i % d] += gg * h;
                    }
                    out
                });
                let gbeta = need[2].then(|| {
                    let mut out = vec![0.0f32; d];
                    for (i, &gg) in g.iter().enumerate() {
                        out[i % d] += gg;
                    }
                    out
                });
                vec![gx, ggamma, gbeta]
            },
        ))
    }

    /// Batch norm over `[N, C]` or `[N, C, L]`, normalizing per channel.
    ///
    /// In training mode batch statistics are used and the running buffers are
    /// updated in place (unbiased variance, like the usual convention). The
    /// statistics and the output are always full precision.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        training: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 2 && s.len() != 3 {
            return shape_err("batch_norm", format!("expects [N,C] or [N,C,L], got {:?}", s));
        }
        let (n, c) = (s[0], s[1]);
        let l = if s.len() == 3 { s[2] } else { 1 };
        for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
            if t.shape() != [c] {
                return shape_err("batch_norm", format!("{} has shape {:?}, expected [{}]", name, t.shape(), c));
            }
        }
        let count = n * l;
        if training && count < 2 {
            return shape_err("batch_norm", "training needs more than one value per channel");
        }
        let x = self.to_vec();
        let at = |ni: usize, ci: usize, li: usize| (ni * c + ci) * l + li;
        let (mean, var): (Vec<f32>, Vec<f32>) = if training {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ci in 0..c {
                let mut sum = 0.0f64;
                for ni in 0..n {
                    for li in 0..l {
                        sum += x[at(ni, ci, li)] as f64;
                    }
                }
                let mu = sum / count as f64;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    for li in 0..l {
                        let dv = x[at(ni, ci, li)] as f64 - mu;
                        sq += dv * dv;
                    }
                }
                mean[ci] = mu as f32;
                var[ci] = (sq / count as f64) as f32;
            }
            running_mean.with_data_mut(|rm| {
                for ci in 0..c {
                    rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
                }
            });
            let unbias = count as f32 / (count - 1) as f32;
            running_var.with_data_mut(|rv| {
                for ci in 0..c {
                    rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci] * unbias;
                }
            });
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let rstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                for li in 0..l {
                    let i = at(ni, ci, li);
                    xhat[i] = (x[i] - mean[ci]) * rstd[ci];
                }
            }
        }
        let gv = gamma.to_vec();
        let bv = beta.to_vec();
        let values: Vec<f32> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ci = (i / l) % c;
                h * gv[ci] + bv[ci]
            })
            .collect();
        let need = [self.requires_grad(), gamma.requires_grad(), beta.requires_grad()];
        let saved = Buffer::new(xhat, DType::F32);
        Ok(Tensor::from_op(
            "batch_norm",
            values,
            s.clone(),
            DType::F32,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _| {
                let xh = saved.as_slice();
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gh = vec![0.0f32; c];
                for (i, (&gg, &h)) in g.iter().zip(xh).enumerate() {
                    let ci = (i / l) % c;
                    sum_g[ci] += gg;
                    sum_gh[ci] += gg * h;
                }
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0f32; g.len()];
                    for (i, o) in gx.iter_mut().enumerate() {
                        let ci = (i / l) % c;
                        let scale = gv[ci] * rstd[ci];
                        *o = if training {
                            scale * (g[i] - sum_g[ci] / count as f32 - xh[i] * sum_gh[ci] / count as f32)
                        } else {
                            scale * g[i]
                        };
                    }
                    gx
                });
                vec![gx, need[1].then(|| sum_gh.clone()), need[2].then(|| sum_g.clone())]
            },
        ))
    }

    /// 1-D convolution, stride 1, no padding: `[N, Cin, L] * [Cout, Cin, K] + [Cout]`.
    pub fn conv1d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (x, w) = if autocast_enabled() {
            (self.cast(DType::F16E), weight.cast(DType::F16E))
        } else {
            (self.clone(), weight.clone())
        };
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sw[2] > sx[2] || sw[2] == 0 {
            return shape_err("conv1d", format!("input {:?} with weight {:?}", sx, sw));
        }
        let (n, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return shape_err("conv1d", format!("bias {:?} for {} output channels", b.shape(), cout));
            }
        }
        let lo = l - k + 1;
        let xv = x.to_vec();
        let wv = w.to_vec();
        let bv = bias.map(|b| b.to_vec());
        let mut out = vec![0.0f32; n * cout * lo];
        for ni in 0..n {
            for co in 0..cout {
                let orow = &mut out[(ni * cout + co) * lo..(ni * cout + co + 1) * lo];
                if let Some(bv) = &bv {
                    orow.iter_mut().for_each(|o| *o = bv[co]);
                }
                for ci in 0..cin {
                    let xrow = &xv[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                    for kk in 0..k {
                        let wgt = wv[(co * cin + ci) * k + kk];
                        for (o, &xx) in orow.iter_mut().zip(&xrow[kk..kk + lo]) {
                            *o += wgt * xx;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x.clone(), w.clone()];
        let need_bias = bias.map(|b| b.requires_grad()).unwrap_or(false);
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let has_bias = bias.is_some();
        let dtype = if autocast_enabled() { DType::F16E } else { join_dtype(x.dtype(), w.dtype()) };
        let (need_x, need_w) = (x.requires_grad(), w.requires_grad());
        let (tx, tw) = (x, w);
        Ok(Tensor::from_op("conv1d", out, vec![n, cout, lo], dtype, inputs, move |g, _| {
            let gx = need_x.then(|| {
                let wv = tw.to_vec();
                let mut gx = vec![0.0f32; n * cin * l];
                for ni in 0..n {
                    for co in 0..cout {
                        let grow = &g[(ni * cout + co) * lo..(ni * cout + co + 1) * lo];
                        for ci in 0..cin {
                            let dst = &mut gx[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                            for kk in 0..k {
                                let wgt = wv[(co * cin + ci) * k + kk];
                                for (d, &gg) in dst[kk..kk + lo].iter_mut().zip(grow) {
                                    *d += wgt * gg;
                                }
                            }
                        }
                    }
                }
                gx
            });
            let gw = need_w.then(|| {
                let xv = tx.to_vec();
                let mut gw = vec![0.0f32; cout * cin * k];
                for ni in 0..n {
                    for co in 0..cout {
                        let grow = &g[(ni * cout + co) * lo..(ni * cout + co + 1) * lo];
                        for ci in 0..cin {
                            let xrow = &xv[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                            for kk in 0..k {
                                gw[(co * cin + ci) * k + kk] +=
                                    grow.iter().zip(&xrow[kk..kk + lo]).map(|(a, b)| a * b).sum::<f32>();
                            }
                        }
                    }
                }
                gw
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(need_bias.then(|| {
                    let mut gb = vec![0.0f32; cout];
                    for ni in 0..n {
                        for co in 0..cout {
                            gb[co] += g[(ni * cout + co) * lo..(ni * cout + co + 1) * lo].iter().sum::<f32>();
                        }
                    }
                    gb
                }));
            }
            res
        }))
    }

    /// Row gather from an embedding table `[V, H]`; output shape `ids_shape + [H]`.
    pub fn embedding(&self, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 {
            return shape_err("embedding", format!("table must be 2-D, got {:?}", self.shape()));
        }
        if numel(ids_shape) != ids.len() {
            return shape_err("embedding", format!("{} ids for shape {:?}", ids.len(), ids_shape));
        }
        let (v, h) = (self.dim(0), self.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err("embedding", format!("id {} out of range for vocab {}", bad, v));
        }
        let values = self.with_data(|w| {
            let mut out = Vec::with_capacity(ids.len() * h);
            for &i in ids {
                out.extend_from_slice(&w[i * h..(i + 1) * h]);
            }
            out
        });
        let mut shape = ids_shape.to_vec();
        shape.push(h);
        let ids = ids.to_vec();
        Ok(Tensor::from_op("embedding", values, shape, self.dtype(), vec![self.clone()], move |g, _| {
            let mut gw = vec![0.0f32; v * h];
            for (row, &i) in ids.iter().enumerate() {
                for (d, &gg) in gw[i * h..(i + 1) * h].iter_mut().zip(&g[row * h..(row + 1) * h]) {
                    *d += gg;
                }
            }
            vec![Some(gw)]
        }))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f32, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", p)));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.numel())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let mut m = Tensor::new(mask, self.shape())?;
        if self.dtype() == DType::F16E {
            m = m.cast(DType::F16E);
        }
        self.mul(&m)
    }
}

/// Concatenate along `dim`; all other dims must agree.
pub fn concat(ts: &[&Tensor], dim: usize) -> Result<Tensor> {
    let first = match ts.first() {
        Some(t) => *t,
        None => return shape_err("concat", "no tensors"),
    };
    let r = first.ndim();
    if dim >= r {
        return shape_err("concat", format!("dim {} out of range for rank {}", dim, r));
    }
    for t in ts {
        let ok = t.ndim() == r
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == dim || a == b);
        if !ok {
            return shape_err("concat", format!("{:?} does not match {:?} off dim {}", t.shape(), first.shape(), dim));
        }
    }
    let outer = numel(&first.shape()[..dim]);
    let inner = numel(&first.shape()[dim + 1..]);
    let lens: Vec<usize> = ts.iter().map(|t| t.shape()[dim]).collect();
    let total: usize = lens.iter().sum();
    let mut values = Vec::with_capacity(outer * total * inner);
    let datas: Vec<Vec<f32>> = ts.iter().map(|t| t.to_vec()).collect();
    for o in 0..outer {
        for (d, &len) in datas.iter().zip(&lens) {
            values.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[dim] = total;
    let dtype = ts.iter().fold(DType::F16E, |acc, t| join_dtype(acc, t.dtype()));
    let inputs: Vec<Tensor> = ts.iter().map(|t| (*t).clone()).collect();
    let need: Vec<bool> = ts.iter().map(|t| t.requires_grad()).collect();
    Ok(Tensor::from_op("concat", values, shape, dtype, inputs, move |g, _| {
        let mut offset = 0usize;
        let mut res = Vec::with_capacity(lens.len());
        for (idx, &len) in lens.iter().enumerate() {
            let gi = need[idx].then(|| {
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    out.extend_from_slice(&g[start..start + len * inner]);
                }
                out
            });
            res.push(gi);
            offset += len;
        }
        res
    }))
}
