pub mod baseline;
pub mod config;
pub mod benchmark;
pub mod dataset;
pub mod gateway;
pub mod icd;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod prompt;
pub mod review;
pub mod rng;
pub mod selection;
pub mod silver;
pub mod simulate;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
