pub mod audio;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod se;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
