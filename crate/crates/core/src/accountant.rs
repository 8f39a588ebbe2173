//! Byte accounting for resident hop-feature storage.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    current: AtomicUsize,
    peak: AtomicUsize,
}

/// Shared counter of bytes held by live [`Lease`]s, with a high-water mark.
#[derive(Clone, Debug, Default)]
pub struct MemoryAccountant {
    inner: Arc<Counters>,
}

impl MemoryAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lease(&self, bytes: usize) -> Lease {
        let now = self.inner.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.inner.peak.fetch_max(now, Ordering::SeqCst);
        Lease { owner: self.clone(), bytes }
    }

    pub fn current(&self) -> usize {
        self.inner.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.inner.peak.store(self.current(), Ordering::SeqCst);
    }
}

/// Releases its bytes when dropped.
#[derive(Debug)]
pub struct Lease {
    owner: MemoryAccountant,
    bytes: usize,
}

impl Lease {
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.owner.inner.current.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}
