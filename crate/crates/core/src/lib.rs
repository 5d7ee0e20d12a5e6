pub mod cli;
pub mod encoder;
pub mod error;
pub mod graphmodel;
pub mod heads;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod preprocess;
pub mod train;
pub mod tvae;

pub use error::{Error, Result};
