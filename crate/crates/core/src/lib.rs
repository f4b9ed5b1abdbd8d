pub mod bspda;
pub mod checkpoint;
pub mod deform;
pub mod error;
pub mod geometry;
pub mod grammar;
pub mod grc;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
