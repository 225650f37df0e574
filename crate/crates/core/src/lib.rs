//! Two-domain segmentation workbench: Gaussian-weighted spectral style
//! transfer, style/content disentangled contrastive pretraining with dense
//! feature consistency, and mean-teacher semi-supervised fine-tuning, all
//! on a synthetic desk-scale benchmark.

pub mod error;
pub mod eval;
pub mod gfda;
pub mod gradcheck;
pub mod image;
pub mod netcore;
pub mod objectives;
pub mod synthdata;
pub mod tensorfft;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
