pub mod config;
pub mod data;
pub mod diff;
pub mod dsp;
pub mod error;
pub mod masking;
pub mod model;
pub mod probe;
pub mod robustness;
pub mod sigreg;
pub mod train;
pub mod viz;

pub use error::{LayaError, Result};
