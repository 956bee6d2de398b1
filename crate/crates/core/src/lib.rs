pub mod dataset;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod models;
pub mod projection;
pub mod seeds;
pub mod serializer;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
