//! Runtime switch between data-parallel and sequential execution.
//!
//! The parallel kernels only split work across independent output cells, so
//! results are bitwise identical in both modes; the switch exists for
//! benchmarking and for the single-thread determinism contract.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Minimum amount of scalar work before a kernel considers splitting.
pub const PARALLEL_WORK_THRESHOLD: usize = 16_384;

/// Force sequential execution for the whole process.
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn sequential() -> bool {
    SEQUENTIAL.load(Ordering::Relaxed)
}

/// Whether a kernel with the given amount of scalar work should go parallel.
#[inline]
pub fn use_parallel(work: usize) -> bool {
    cfg!(feature = "parallel") && !sequential() && work >= PARALLEL_WORK_THRESHOLD
}
