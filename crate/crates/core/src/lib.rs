//! Desk-scale vehicle re-identification.
//!
//! The crate covers the full loop: a synthetic dataset whose identity signal
//! lives inside annotated part boxes, a small reverse-mode tensor engine with
//! a convolutional backbone, the re-identification loss stack with
//! part-weighted pooling, part detection post-processing, and the retrieval
//! evaluation protocol (mAP, CMC, attribute accuracy, 2AFC).

pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod losses;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
