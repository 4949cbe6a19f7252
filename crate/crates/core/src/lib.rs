//! BrightVAE: a hierarchical vector-quantized autoencoder with attention-augmented
//! encoders and attention-weighted quantization, for brightening underexposed
//! endoscopic images.

pub mod attencoder;
pub mod attenquant;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;

pub use config::{BrightVaeConfig, ComponentToggles, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{parameter_count, BrightVae, ForwardResult};
