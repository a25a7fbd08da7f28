//! Spatial-frequency adversarial attack against a small anchor-based object
//! detector, with the synthetic data, training, evaluation and corruption
//! tooling around it.

pub mod attack;
pub mod bbox;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub(crate) mod nn;
pub mod par;
pub mod plot;
pub mod targeting;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
