//! Primitive kernels on [`Tensor`](crate::Tensor) values: forward passes, their
//! vector-Jacobian products, and closed-form multiply-accumulate counts.
//!
//! Every forward kernel that performs multiply-accumulates takes an optional
//! [`MacCounter`]; the kernels bump it from inside their loops, which is what the
//! analytic profiler is checked against.

use std::sync::atomic::{AtomicU64, Ordering};

mod conv;
mod layout;
mod norm;
mod pointwise;

pub use conv::*;
pub use layout::*;
pub use norm::*;
pub use pointwise::*;

/// Counts multiply-accumulates actually executed by the kernels.
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

#[inline]
pub(crate) fn charge(macs: Option<&MacCounter>, n: u64) {
    if let Some(m) = macs {
        m.add(n);
    }
}
