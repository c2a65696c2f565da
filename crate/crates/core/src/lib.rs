//! Retinal image captioning: CNN disease classifier, keyword-conditioned
//! LSTM caption decoder, class activation maps, caption metrics and reports.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod language;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
