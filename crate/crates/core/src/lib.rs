pub mod attention;
pub mod cli;
pub mod cnm;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod mpts;
pub mod nn;
pub mod notes;
pub mod ptsm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
