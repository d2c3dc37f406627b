pub mod analysis;
pub mod cluster;
pub mod data;
pub mod error;
pub mod experiment;
pub mod features;
pub mod nn;
pub mod reweight;

pub use error::{Error, Result};
