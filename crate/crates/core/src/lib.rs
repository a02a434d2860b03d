//! Operational neural network engine for severe image denoising.
//!
//! An operational neuron generalizes the convolutional neuron: the
//! per-synapse multiply becomes a pluggable nodal function, the window
//! summation becomes a pluggable pool function, and the activation stays
//! pointwise. Networks built from such neurons are trained with exact
//! analytic gradients over an im2col patch-matrix formulation, so a
//! network of (mul, sum) neurons is bit-for-bit a CNN.
//!
//! On top of the engine sits Synaptic Plasticity Monitoring (SPM): a
//! Hebbian-inspired search that ranks operator sets per layer by how much
//! the variance of a neuron's outgoing weights moves during short probe
//! trainings, then assembles an "elite" heterogeneous network from the
//! top-ranked sets.
//!
//! Crate layout mirrors the pipeline:
//! - [`tensor`]: dense tensors, patch matrices (im2col and its adjoint)
//! - [`operators`]: the nodal/pool/activation registry with derivatives
//! - [`network`]: layers, forward/backward, loss, checkpoints
//! - [`optim`]: SGD, ADAM, and variance-ADAM
//! - [`spm`]: health factors, ledgers, elite configuration
//! - [`denoise`]: noise models, PSNR, cross-validated protocol
//! - [`config`]: experiment configuration files
//! - [`gradcheck`]: finite-difference validation of the backward pass
//! - [`report`]: CSV aggregation for result tables

pub mod config;
pub mod denoise;
pub mod gradcheck;
pub mod network;
pub mod operators;
pub mod optim;
pub mod report;
pub mod rng;
pub mod spm;
pub mod tensor;
pub mod train;

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the engine and the experiment harness.
#[derive(Debug)]
pub enum Error {
    /// Two tensors or matrices that must agree in shape do not.
    ShapeMismatch { expected: String, got: String },
    /// Kernel extents must be odd and positive.
    InvalidKernel { rows: usize, cols: usize },
    /// An operation received an empty input.
    EmptyInput(&'static str),
    /// An operator id is not in the registry.
    UnknownOperator(String),
    /// Configuration file or value error.
    Config(String),
    /// Dataset or on-disk artifact error.
    Data(String),
    /// Training or evaluation produced non-finite values.
    Numerical(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::InvalidKernel { rows, cols } => {
                write!(f, "kernel extents must be odd and positive, got {rows}x{cols}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::UnknownOperator(id) => write!(f, "unknown operator id: {id:?}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
