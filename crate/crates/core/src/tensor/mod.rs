//! Dense tensors with a dynamic reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to a node holding its data buffer,
//! an optional accumulated gradient and, for op results, the closure that
//! maps the output gradient back onto its inputs. The graph is rebuilt on
//! every forward pass and freed when the last handle to the loss drops.
//!
//! Half precision is emulated: an [`DType::F16E`] tensor stores `f32` values
//! that are exactly representable in IEEE binary16 and is billed two bytes per
//! element by the [`memory`] ledger. Gradients are always full precision.

mod autograd;
pub mod memory;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::error::{shape_err, Result};
use memory::Buffer;

pub use ops::concat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    /// Values round-tripped through binary16; arithmetic stays in `f32`.
    F16E,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16E => 2,
        }
    }
}

/// Round to the nearest binary16 value (ties to even), returned as `f32`.
#[inline]
pub fn quantize_f16(x: f32) -> f32 {
    half::f16::from_f32(x).to_f32()
}

pub(crate) type BackwardFn = dyn Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync;

pub(crate) struct GradFn {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    /// `(grad_out, out_values) -> grad per input` (None where not needed).
    pub(crate) backward: Box<BackwardFn>,
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    dtype: DType,
    data: RwLock<Buffer>,
    grad: Mutex<Option<Buffer>>,
    requires_grad: AtomicBool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static AUTOCAST: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _r = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with half-precision autocasting of matmul/conv inputs and outputs.
pub fn autocast<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = AUTOCAST.with(|a| a.replace(enabled));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            AUTOCAST.with(|a| a.set(self.0));
        }
    }
    let _r = Restore(prev);
    f()
}

pub fn autocast_enabled() -> bool {
    AUTOCAST.with(|a| a.get())
}

impl Tensor {
    fn from_node(
        values: Vec<f32>,
        shape: Vec<usize>,
        dtype: DType,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            dtype,
            data: RwLock::new(Buffer::new(values, dtype)),
            grad: Mutex::new(None),
            requires_grad: AtomicBool::new(requires_grad),
            grad_fn,
        }))
    }

    pub fn new(values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return shape_err(
                "new",
                format!("{} values do not fill shape {:?}", values.len(), shape),
            );
        }
        Ok(Self::from_node(values, shape.to_vec(), DType::F32, false, None))
    }

    /// Leaf tensor that participates in autodiff.
    pub fn param(values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Self::new(values, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn from_slice(values: &[f32], shape: &[usize]) -> Result<Tensor> {
        Self::new(values.to_vec(), shape)
    }

    pub fn scalar(v: f32) -> Tensor {
        Self::from_node(vec![v], vec![], DType::F32, false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::from_node(vec![0.0; n], shape.to_vec(), DType::F32, false, None)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let n = shape.iter().product();
        Self::from_node(vec![v; n], shape.to_vec(), DType::F32, false, None)
    }

    /// Build an op result, recording a graph node only when needed.
    pub(crate) fn from_op(
        name: &'static str,
        mut values: Vec<f32>,
        shape: Vec<usize>,
        dtype: DType,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    ) -> Tensor {
        if dtype == DType::F16E {
            for v in values.iter_mut() {
                *v = quantize_f16(*v);
            }
        }
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn {
            name,
            inputs,
            backward: Box::new(backward),
        });
        Self::from_node(values, shape, dtype, track, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    /// Toggle trainability of a leaf. Freezing also drops any stored gradient.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.store(on, Ordering::Relaxed);
        if !on {
            *self.0.grad.lock() = None;
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.read().as_slice().to_vec()
    }

    /// Read access to the values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(self.0.data.read().as_slice())
    }

    /// In-place update of a leaf's values (optimizer steps, checkpoint loads).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f32]) -> R) -> R {
        let mut guard = self.0.data.write();
        let out = f(guard.as_mut_slice());
        if self.0.dtype == DType::F16E {
            for v in guard.as_mut_slice() {
                *v = quantize_f16(*v);
            }
        }
        out
    }

    pub fn item(&self) -> f32 {
        self.0.data.read().as_slice()[0]
    }

    pub fn data_bytes(&self) -> u64 {
        self.0.data.read().bytes()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().as_ref().map(|b| b.as_slice().to_vec())
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().is_some()
    }

    pub fn with_grad_mut<R>(&self, f: impl FnOnce(Option<&mut [f32]>) -> R) -> R {
        let mut guard = self.0.grad.lock();
        f(guard.as_mut().map(|b| b.as_mut_slice()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut guard = self.0.grad.lock();
        match guard.as_mut() {
            Some(buf) => {
                for (a, b) in buf.as_mut_slice().iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => *guard = Some(Buffer::new(g.to_vec(), DType::F32)),
        }
    }

    /// Overwrite the stored gradient (used by tests and loss-scaling checks).
    pub fn set_grad(&self, g: Vec<f32>) -> Result<()> {
        if g.len() != self.numel() {
            return shape_err("set_grad", "gradient length differs from tensor");
        }
        *self.0.grad.lock() = Some(Buffer::new(g, DType::F32));
        Ok(())
    }

    /// A new leaf with the same values and no history.
    pub fn detach(&self) -> Tensor {
        Self::from_node(self.to_vec(), self.shape().to_vec(), self.dtype(), false, None)
    }

    /// Deep copy into a fresh leaf with the same trainable flag.
    pub fn deep_clone(&self) -> Tensor {
        Self::from_node(
            self.to_vec(),
            self.shape().to_vec(),
            self.dtype(),
            self.requires_grad() && self.is_leaf(),
            None,
        )
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.read();
        let vals = data.as_slice();
        let preview: Vec<f32> = vals.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, dtype={:?}, requires_grad={}, data={:?}{})",
            self.shape(),
            self.dtype(),
            self.requires_grad(),
            preview,
            if vals.len() > 8 { ", ..." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests;
