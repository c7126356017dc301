//! Benchmark harness for binary Normal/Pneumonia classification of chest
//! X-rays with a baseline CNN and eight fine-tuned backbone families.

pub mod augment;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod model_zoo;
pub mod nn;
pub mod par;
pub mod plane;
pub mod preprocess;
pub mod report;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
