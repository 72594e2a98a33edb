pub mod error;
pub mod graph;
pub mod harness;
pub mod optim;
pub mod attack;
pub mod config;
pub mod data;
pub mod params;
pub mod report;
pub mod sharpness;
pub mod stats;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
