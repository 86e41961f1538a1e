//! End-to-end trainable action segmentation over coarsely sampled video.
//!
//! The pipeline: a (toy) transformer backbone fine-tuned through
//! contract-expand adapters, an anchor-free boundary-regression detector on
//! low-FPS features, proposal aggregation to full-rate per-frame class
//! distributions, and a multi-stage dilated TCN refiner — plus the
//! segmentation metric suite, proposal-drop augmentation, synthetic data
//! generation and a training/evaluation CLI.

pub mod error;
pub mod adapters;
pub mod aggregate;
pub mod backbone;
pub mod augment;
pub mod cli;
pub mod data;
pub mod detector;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod refine;
pub(crate) mod nn;
pub mod types;
pub mod tensor;

pub use error::{Error, Result};

/// Entry point used by the `east` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::main_with_args(std::env::args_os())
}
