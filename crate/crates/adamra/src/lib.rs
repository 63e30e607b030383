//! Adaptive multi-resolution attention at desk scale.
//!
//! An attention layer whose heads read differently-compressed key/value
//! memories (segment means at per-head rates), with a learned router sending
//! each query to one head and kernelized (linear-time) attention inside each
//! head. The crate ships the layer with exact manual gradients, reference
//! softmax/kernel attention baselines, finite-difference checking, synthetic
//! sequence tasks with a small trainer, a scaling benchmark, and the SMAT
//! speed-memory-accuracy composite score.

// gradient code indexes several parallel structures per position; explicit
// indices read better there than zipped iterator chains
#![allow(clippy::needless_range_loop)]

pub mod backward;
pub mod baseline;
pub mod bench;
pub mod config;
pub mod cost;
pub mod diffcheck;
pub mod error;
pub mod layer;
pub mod mat;
pub mod oracle;
pub mod serialize;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
pub use mat::Matrix;
