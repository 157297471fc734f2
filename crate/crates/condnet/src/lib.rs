//! Conditional-network engine.
//!
//! A conditional network is a DAG of data-transformation nodes (projections,
//! convolutions, pooling) augmented with selection matrices and trainable
//! routers, so that at inference time only a data-dependent subset of the
//! graph is evaluated. This crate provides the tensor/autodiff substrate,
//! the graph model with soft / hard / top-τ routing, an exact
//! multiply-accumulate cost model, SGD training, size-normalized
//! architecture search, explicitly-routed ensembles of pretrained experts,
//! and activation-correlation analysis.

pub mod analysis;
pub mod builder;
pub mod config;
pub mod cost;
pub mod data;
pub mod dense;
pub mod ensemble;
pub mod forward;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod search;
pub mod tape;
pub mod tensor;
pub mod train;

pub use graph::{ArchSpec, CompiledArch, NodeKind, NodeSpec, PolicyMode, RoutingPolicy};
pub use tape::{Param, ParamId, ParamStore, Tape, ValueId};
pub use tensor::{ActivationKind, Scalar, Tensor};

use thiserror::Error;

/// Errors produced by the engine. Variants map to the distinct failure
/// classes callers are expected to branch on (shape vs configuration vs
/// state vs data).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
