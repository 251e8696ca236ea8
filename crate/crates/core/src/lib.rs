//! Mogrifier LSTM language modelling.
//!
//! The crate is self-contained: [`numerics`] provides tensors and a
//! reverse-mode tape, [`cells`] the recurrent cells, [`model`] the stacked
//! language model, and the remaining modules cover data handling, training,
//! evaluation and hyperparameter search.

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod copytask;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;
pub mod tuner;

pub use error::{Error, Result};
