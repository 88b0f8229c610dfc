//! Byte accounting for tensor buffers.
//!
//! Every [`Buffer`] bills its bytes to the ledger that was current on the
//! allocating thread and refunds the same ledger on drop. Only buffer bytes
//! (tensor data, gradients, optimizer slots) are counted; graph bookkeeping is
//! not.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::DType;

/// Live/peak byte counters. Reads are lock-free and safe from any thread.
#[derive(Debug, Default)]
pub struct MemoryLedger {
    live: AtomicU64,
    peak: AtomicU64,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: u64) {
        let live = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(live, Ordering::Relaxed);
    }

    pub fn free(&self, bytes: u64) {
        let prev = self.live.fetch_sub(bytes, Ordering::Relaxed);
        debug_assert!(prev >= bytes, "ledger underflow");
    }

    pub fn live_bytes(&self) -> u64 {
        self.live.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak.load(Ordering::Relaxed)
    }

    /// Lower the high-water mark to the current live count.
    pub fn reset_peak(&self) {
        self.peak.store(self.live.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

thread_local! {
    static CURRENT: RefCell<Arc<MemoryLedger>> = RefCell::new(Arc::new(MemoryLedger::new()));
}

/// The ledger new buffers on this thread are billed to.
pub fn current_ledger() -> Arc<MemoryLedger> {
    CURRENT.with(|c| c.borrow().clone())
}

/// Run `f` with `ledger` installed as this thread's current ledger.
pub fn with_ledger<R>(ledger: Arc<MemoryLedger>, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Arc<MemoryLedger>>);
    impl Drop for Restore {
        fn drop(&mut self) {
            if let Some(prev) = self.0.take() {
                CURRENT.with(|c| *c.borrow_mut() = prev);
            }
        }
    }
    let prev = CURRENT.with(|c| std::mem::replace(&mut *c.borrow_mut(), ledger));
    let _restore = Restore(Some(prev));
    f()
}

pub fn reset_peak() {
    CURRENT.with(|c| c.borrow().reset_peak())
}

pub fn peak_bytes() -> u64 {
    CURRENT.with(|c| c.borrow().peak_bytes())
}

pub fn live_bytes() -> u64 {
    CURRENT.with(|c| c.borrow().live_bytes())
}

/// A ledger-billed numeric buffer. Values are always held as `f32`; the dtype
/// only decides how many bytes each element is billed for.
#[derive(Debug)]
pub struct Buffer {
    values: Vec<f32>,
    bytes: u64,
    ledger: Arc<MemoryLedger>,
}

impl Buffer {
    pub fn new(values: Vec<f32>, dtype: DType) -> Self {
        let ledger = current_ledger();
        let bytes = (values.len() * dtype.size_of()) as u64;
        ledger.alloc(bytes);
        Self { values, bytes, ledger }
    }

    pub fn zeros(len: usize, dtype: DType) -> Self {
        Self::new(vec![0.0; len], dtype)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        self.ledger.alloc(self.bytes);
        Self {
            values: self.values.clone(),
            bytes: self.bytes,
            ledger: self.ledger.clone(),
        }
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        self.ledger.free(self.bytes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_free_reset_peak() {
        let ledger = Arc::new(MemoryLedger::new());
        with_ledger(ledger.clone(), || {
            let before = live_bytes();
            {
                let _b = Buffer::zeros(1000, DType::F32);
                assert_eq!(live_bytes(), before + 4000);
            }
            assert_eq!(live_bytes(), before);
            assert!(peak_bytes() >= before + 4000);
            reset_peak();
            assert_eq!(peak_bytes(), live_bytes());
        });
    }

    #[test]
    fn half_buffers_bill_two_bytes() {
        let ledger = Arc::new(MemoryLedger::new());
        with_ledger(ledger.clone(), || {
            let _b = Buffer::zeros(10, DType::F16E);
            assert_eq!(ledger.live_bytes(), 20);
        });
        assert_eq!(ledger.live_bytes(), 0);
    }

    #[test]
    fn ledgers_are_isolated_per_scope() {
        let a = Arc::new(MemoryLedger::new());
        let b = Arc::new(MemoryLedger::new());
        let keep = with_ledger(a.clone(), || Buffer::zeros(8, DType::F32));
        with_ledger(b.clone(), || {
            let _x = Buffer::zeros(4, DType::F32);
            assert_eq!(b.live_bytes(), 16);
        });
        assert_eq!(a.live_bytes(), 32);
        assert_eq!(b.live_bytes(), 0);
        assert_eq!(b.peak_bytes(), 16);
        drop(keep);
        assert_eq!(a.live_bytes(), 0);
    }
}
