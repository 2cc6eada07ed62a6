//! Insertion-based non-autoregressive sequence recognition jointly trained
//! with CTC, with block self-attention for causal frame processing and
//! blank-run segmentation of streaming input.

pub mod attention;
pub mod config;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod insertion;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod streaming;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
