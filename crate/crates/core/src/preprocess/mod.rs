//! Dynamic-to-static summation, SUVR normalisation, brain extraction, affine
//! registration and axial slicing.

mod frames;
mod mask;
mod pipeline;
mod registration;

pub use frames::{normalize_suvr, slice_axial, stack_axial, sum_late_frames};
pub use mask::{extract_brain_mask, gaussian_blur, gaussian_blur_mm, otsu_threshold, BrainMask};
pub use pipeline::{half_level_support, preprocess_subject, support_mask, PreprocessConfig, PreprocessedSubject};
pub use registration::{
    register_affine, resample, resample_with, AffineTransform, Interpolation, RegistrationConfig, RegistrationResult,
};
