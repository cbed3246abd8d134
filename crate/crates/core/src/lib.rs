pub mod adaptation;
pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod latent;
pub mod nn;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
