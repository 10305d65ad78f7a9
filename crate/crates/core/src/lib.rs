pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod hvt;
pub mod metrics;
pub mod mimo;
pub mod refiner;
pub mod seeds;

pub use error::{CoreError, Result};
