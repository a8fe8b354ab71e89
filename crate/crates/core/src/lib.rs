//! Box-, modality- and content-prompted medical image segmentation.
//!
//! The crate covers the dataset layer, balanced sampling, the model
//! (image encoder, prompt encoder, mask decoder), losses, metrics, the
//! training loop and slice-wise inference. Numerics run on candle's CPU
//! backend; data-parallel work goes through [`exec`], which uses rayon when
//! the `parallel` feature is enabled.

pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod embed_provider;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod inference;
pub mod losses;
pub mod mask_decoder;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prompt_encoder;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
