pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod export;
pub mod iob;
pub mod meta;
pub mod model;
pub mod nn;
pub mod run;
pub mod synth;
pub mod tokenize;
pub mod train;

pub use error::{HmeError, Result};
