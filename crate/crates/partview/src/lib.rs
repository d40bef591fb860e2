//! Part-based multi-view 3D shape features.
//!
//! `partview` renders synthetic labeled shapes into view sequences, learns to
//! detect their semantic parts with a region proposal network plus a local
//! detection branch, and aggregates detected part features into a single
//! global shape descriptor through a two-level attention mechanism. The
//! descriptor feeds classification and retrieval; everything runs on the CPU
//! over 64-bit floats with a self-contained reverse-mode autodiff tape.
//!
//! The crate is a library first: see the `examples/` directory for runnable
//! entry points covering dataset generation, training, detection, attention
//! inspection, ablations, gradient checking and retrieval. The `partview`
//! binary wraps the same calls behind subcommands.

pub mod detect;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod agg;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod gradsuite;
pub mod model;
pub mod region;
pub mod shapegen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{decode_box, encode_box, iou, Box2};
pub use tensor::{grad_check, Parameter, Tape, Tensor};

/// Entry point for the `partview` binary.
pub fn run_cli() -> i32 {
    cli::run()
}
