//! Diagnostics for low-rank pre-training of small decoder language models.
//!
//! The crate trains a desk-scale LLaMA-style decoder under six regimes
//! (full-rank Adam, GaLore, Fira, CoLA, SLTrain, ReLoRA), stores checkpoint
//! series, and characterises them through loss-landscape slices, linear
//! interpolation barriers, singular-value spectra and activation similarity.
//! A linear predictor relates those features to a downstream score.
//!
//! Numeric kernels are generic over [`Scalar`]; the aliases below fix the
//! `f64` instantiation used by models and checkpoints.

pub mod activations;
pub mod checkpoint;
pub mod error;
pub mod interp;
pub mod landscape;
pub mod linalg;
pub mod model;
pub mod predictor;
pub mod objective;
pub mod scalar;
pub mod spectra;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense `f64` matrix.
pub type Matrix = linalg::Matrix<f64>;
/// Thin SVD of an `f64` matrix.
pub type SvdResult = linalg::Svd<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
