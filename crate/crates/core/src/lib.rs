pub mod cohort;
pub mod config;
pub mod data;
pub mod error;
pub mod fairness;
pub mod fusion;
pub mod io;
pub mod learners;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
