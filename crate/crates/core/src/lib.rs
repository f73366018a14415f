//! Direction-of-arrival estimation for uniform circular arrays.
//!
//! The centrepiece is an autoencoder whose decoder is not learned: a
//! convolutional encoder maps a sample covariance to the physical parameters
//! `{θ, Λ, L, σ²}`, and the fixed signal model turns them back into a
//! covariance `C_y = A(θ) C_s A(θ)ᴴ + σ² I`. Training minimizes the
//! stochastic maximum-likelihood loss (or, for comparison, plain covariance
//! matching) on freshly simulated data, so no labels are ever needed.
//!
//! MUSIC and SPICE are provided as grid-based baselines, together with the
//! periodic-error metric and Monte-Carlo sweep drivers.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the file formats
//! and the CLI use.

pub mod array;
pub mod encoder;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod linalg;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod snapshot_io;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ComplexMatrix = linalg::ComplexMatrix<f64>;
pub type ArrayGeometry = array::ArrayGeometry<f64>;
pub type Scenario = array::Scenario<f64>;
pub type LatentParams = array::LatentParams<f64>;
pub type SnapshotBatch = array::SnapshotBatch<f64>;
pub type LatentGradient = objective::LatentGradient<f64>;
pub type EncoderModel = encoder::EncoderModel<f64>;
pub type TrainOutcome = encoder::TrainOutcome<f64>;
pub type AngularGrid = estimators::AngularGrid<f64>;
pub type DoAEstimate = estimators::DoAEstimate<f64>;

pub type ComplexMatrix32 = linalg::ComplexMatrix<f32>;
pub type ArrayGeometry32 = array::ArrayGeometry<f32>;
pub type LatentParams32 = array::LatentParams<f32>;
pub type EncoderModel32 = encoder::EncoderModel<f32>;
