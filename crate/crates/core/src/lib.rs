pub mod datagen;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experts;
pub mod gaussian;
pub mod model;
pub mod nn;

pub use error::{MagnetError, Result};
