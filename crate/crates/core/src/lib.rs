//! Structural MRI to amyloid PET translation at desk scale: synthetic paired
//! phantoms, preprocessing, a normalization-free conditional adversarial
//! translator with a brain-masked loss, and SSIM/PSNR/SUVR evaluation.

// `!(x > 0.0)` and friends are how NaN is rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
