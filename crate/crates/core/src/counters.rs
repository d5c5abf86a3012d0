//! Process-wide tallies of recoverable anomalies (clamped inputs, dropped
//! pixels, degenerate masks). Read them for diagnostics; nothing depends on
//! their values.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug)]
pub struct Counter(AtomicU64);

impl Counter {
    const fn new() -> Self {
        Self(AtomicU64::new(0))
    }

    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// One-blob inputs outside (0, 1) that were clamped.
pub static ONEBLOB_CLAMPED: Counter = Counter::new();
/// Disparity pixels dropped because the alignment denominator was too small.
pub static ALIGN_DROPPED: Counter = Counter::new();
/// SDF batches without any near-surface sample.
pub static EMPTY_NEAR_SURFACE: Counter = Counter::new();
/// Depth-normal evaluations whose valid mask was empty.
pub static EMPTY_DEPTH_NORMAL: Counter = Counter::new();
