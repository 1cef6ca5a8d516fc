//! Minimal reverse-mode differentiable array engine.
//!
//! Values are recorded on a [`Tape`] while a forward pass runs; a call to
//! [`Tape::backward`] replays the recorded operations in reverse and returns
//! the adjoint of every node that depends on a gradient-carrying leaf.
//! Trainable weights live in a [`ParamStore`] outside the tape, so a tape can
//! be thrown away after each step.

mod gradcheck;
mod optim;
mod params;
mod recurrent;
mod scalar;
mod tape;
mod tensor;


pub use gradcheck::{
    grad_check, grad_check_store, relative_error, GradCheckReport, GRADIENT_FLOOR,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use recurrent::{lstm_cell, lstm_cell_projected, LstmWeights};
pub use scalar::Real;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error(
        "degenerate output length: L={len}, kernel={kernel}, pad={pad}, stride={stride} leaves no window"
    )]
    DegenerateLength {
        len: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
    },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },
}
