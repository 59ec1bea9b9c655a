//! Multi-label image classifier built around label-wise feature parcels,
//! per-label attentional region extraction, and explicit pairwise label
//! relation reasoning, together with a seeded synthetic-data harness for
//! training, evaluation, and visualization on a CPU.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod param;
pub mod parcels;
pub mod relation;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{grad_check, Activation, Tape, Tensor};
