//! In-context linear regression with single-layer attention: data, model,
//! hand-written gradients, training, adversarial attacks and the numerical
//! side of the generalization bounds.

pub mod analysis;
pub mod attack;
pub mod datagen;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
