//! Consistency-preserved two-stage retrieval and target attention over lifelong
//! user behavior sequences.

pub mod attention;
pub mod datagen;
pub mod error;
pub mod features;
pub mod numerics;
pub mod retrieval;
pub mod scalar;
pub mod serving;
pub mod snapshot;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
