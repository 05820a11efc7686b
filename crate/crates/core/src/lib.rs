pub mod config;
pub mod decoder;
pub mod encoders;
mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod model;
pub mod scene;
pub mod train;

pub use error::{CmtError, Result};
