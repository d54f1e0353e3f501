//! Continual bi-modal segmentation: a small image+prompt segmenter learns a sequence of
//! tasks through low-rank adapters chosen by prompt similarity, while Fisher importance and
//! a hard-sample replay buffer protect earlier tasks.

// `!(x >= 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod consolidation;
pub mod error;
pub mod experiment;
pub mod fdcheck;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod taskgen;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};

/// Training allocates and frees many same-sized buffers per step. glibc's default policy
/// hands large ones back to the kernel on every free, which costs more than the arithmetic,
/// so raise the mmap and trim thresholds once per process. No-op on other platforms.
pub fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 25);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
