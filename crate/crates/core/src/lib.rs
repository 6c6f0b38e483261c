pub mod adapter;
pub mod checks;
pub mod config;
pub mod cost;
pub mod error;
pub mod exec;
pub mod io;
pub mod model;
pub mod nn;
pub mod pathways;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
