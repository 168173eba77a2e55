//! One-stage scene text removal with a hierarchical transformer
//! encoder-decoder, its adversarial training objective, joint
//! segmentation/masked-image pretraining and image-quality evaluation.

pub mod blocks;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod segmim;
pub mod settings;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
