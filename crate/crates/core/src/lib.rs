//! Patch-autoencoder background modelling, memory-bank prior retrieval and
//! SSIM-penalized decomposition for unsupervised defect segmentation.

pub mod addressing;
pub mod bank;
pub mod decomposition;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod nn;
pub mod optim;
pub mod par;
pub mod ssim;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Image, Mask, Tensor};
