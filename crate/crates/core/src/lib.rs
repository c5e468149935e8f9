pub mod adapters;
pub mod analysis;
pub mod audit;
pub mod benchmark;
pub mod container;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod outlier;
pub mod rng;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
