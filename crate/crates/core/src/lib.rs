//! Compositional slot-attention auto-encoder with a jointly trained diffusion prior.

pub mod arrayfile;
pub mod cli;
pub mod compose;
pub mod config;
pub mod decoders;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod render;
pub mod scenegen;
pub mod slotcore;
pub mod trainer;

pub use error::{Error, Result};
