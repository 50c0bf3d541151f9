//! Masked-autoencoder representation learning on 3D Gaussian splat
//! parameters.

pub mod config;
pub mod dataset;
pub mod distmetrics;
pub mod error;
pub mod finetune;
pub mod grouping;
pub mod mae;
pub mod metrics;
pub mod numerics;
pub mod ply;
pub mod seed;
pub mod splat;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use splat::{ParamKind, SplatSet};
