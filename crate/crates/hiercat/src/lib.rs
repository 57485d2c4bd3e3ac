//! Hierarchical product classification with a unified structured-output
//! model.
//!
//! One network predicts three taxonomy levels of a product image at once:
//! its category (softmax over mutually exclusive classes), its sub-category
//! (softmax), and its attributes (independent sigmoids). A message
//! propagation block exchanges information between the levels before
//! classification, so the three heads agree with each other far more often
//! than independently trained specialist models do. Gender and family, the
//! two levels above category, are inferred from the taxonomy rather than
//! predicted.
//!
//! Everything is built on a small tape-based reverse-mode autodiff engine
//! ([`tensor`]), checked against finite differences ([`gradcheck`]). The
//! crate ships a synthetic data generator so the full pipeline runs without
//! any proprietary catalog.
//!
//! The examples are the front door; each one is a small runnable program:
//!
//! ```text
//! cargo run --example generate_dataset           synthesize a labeled catalog
//! cargo run --example train_unified              train and evaluate the unified model
//! cargo run --example baseline_pipeline          train the specialist baseline
//! cargo run --example predict_products           per-product predictions
//! cargo run --example audit_missing_annotations  recover labels the annotators missed
//! cargo run --example message_passing            probe the propagation topology
//! cargo run --example parameter_accounting       closed-form parameter budget
//! cargo run --example gradient_check             autodiff vs finite differences
//! cargo run --example tensor_tape                the autodiff engine by hand
//! cargo run --example image_augmentation         deterministic augmentation
//! ```
//!
//! The same capabilities are reachable through one thin binary:
//! `hiercat <generate|train|evaluate|predict|audit|params|stats>`.

pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod taxonomy;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, Value};

/// Errors produced by fallible operations: file I/O, malformed inputs, bad
/// run configurations, and training faults. Shape violations inside the
/// numeric kernels are programmer errors and panic instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// A file exists but does not parse as the format it claims to be.
    #[error("format error: {0}")]
    Format(String),
    /// A run configuration is contradictory or incomplete.
    #[error("config error: {0}")]
    Config(String),
    /// Records contradict the taxonomy or each other.
    #[error("data error: {0}")]
    Data(String),
    /// Training became numerically unusable.
    #[error("training error: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;
