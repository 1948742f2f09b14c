//! Semantic communication link: visual tokenizers, fusion, projection, a
//! token model with low-rank adapters and a simulated wireless channel.

pub mod autodiff;
pub mod channel;
pub mod data;
pub mod experiment;
pub mod ban;
mod error;
pub mod kan;
pub mod llm;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
