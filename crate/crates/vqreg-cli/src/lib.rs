//! Harness: configuration, dataset handling, the training loop, evaluation
//! and experiment orchestration behind the `vqreg` command line.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod experiments;
pub mod trainer;

pub use config::{Profile, TrainConfig};
pub use dataset::{DatasetSpec, SplitDataset};
pub use evaluate::{evaluate_model, unregistered_report};
pub use trainer::{train, EpochRow, TrainOutcome};

/// Deterministic-mode switch: forces strictly serial batch processing.
/// Batch results are order-fixed either way, so runs are reproducible with
/// or without it; the switch removes thread scheduling from the picture
/// entirely.
pub fn deterministic_mode() -> bool {
    std::env::var("VQREG_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

/// Keep large transient buffers on the heap instead of per-allocation mmap;
/// the training loop recreates multi-megabyte graph buffers thousands of
/// times and page-fault churn dominates otherwise. Idempotent.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
