//! The per-subject chain: late-frame summation, PET-to-MRI and MRI-to-template
//! registration, brain extraction, SUVR normalisation.

use serde::{Deserialize, Serialize};

use super::frames::{normalize_suvr, sum_late_frames};
use super::mask::{extract_brain_mask, gaussian_blur, BrainMask};
use super::registration::{
    register_affine, resample, resample_with, AffineTransform, Interpolation, RegistrationConfig,
    RegistrationResult,
};
use crate::error::{Error, Result};
use crate::volume::{FrameSequence, Units, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Frames whose midpoint is at or after this time are summed.
    pub window_start_min: f64,
    /// PET support is every voxel above this fraction of the 99th percentile.
    /// One half puts the contour on the blurred cortical edge.
    pub pet_support_fraction: f64,
    /// Blur applied to support masks before registering them (voxels).
    pub registration_blur_vox: f64,
    pub register_mri_to_template: bool,
    pub registration: RegistrationConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_start_min: 30.0,
            pet_support_fraction: 0.5,
            registration_blur_vox: 1.0,
            register_mri_to_template: true,
            registration: RegistrationConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreprocessedSubject {
    /// Brain-extracted MRI in template space.
    pub mri: Volume,
    /// Brain-extracted SUVR PET in template space.
    pub pet_suvr: Volume,
    pub mask: BrainMask,
    /// Native MRI → template.
    pub mri_to_template: AffineTransform,
    /// Native PET → native MRI.
    pub pet_to_mri: AffineTransform,
    pub pet_registration: RegistrationResult,
}

/// Voxels above `fraction` of the 99th-percentile intensity, largest component.
pub fn support_mask(vol: &Volume, fraction: f64) -> Result<BrainMask> {
    let mut sorted = vol.voxels().to_vec();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted[((sorted.len() - 1) as f64 * 0.99).round() as usize];
    if !(p99 > 0.0) {
        return Err(Error::EmptyMask);
    }
    let mask = BrainMask::from_threshold(vol, fraction * p99).largest_component();
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

/// Voxels above half the median intensity of the brain mask's outer shell,
/// largest component. Otsu sits above the partial-volume midpoint when the
/// outer tissue is dim, which shrinks the mask; the half-shell level does not.
pub fn half_level_support(vol: &Volume, mask: &BrainMask) -> Result<BrainMask> {
    let inner = mask.erode();
    let mut shell: Vec<f64> = vol
        .voxels()
        .iter()
        .zip(mask.bits().iter().zip(inner.bits()))
        .filter(|(_, (&m, &i))| m && !i)
        .map(|(&v, _)| v)
        .collect();
    if shell.is_empty() {
        return Err(Error::EmptyMask);
    }
    shell.sort_by(f64::total_cmp);
    let support = BrainMask::from_threshold(vol, 0.5 * shell[shell.len() / 2]).largest_component();
    if support.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(support)
}

fn mask_image(mask: &BrainMask, spacing: [f64; 3], blur: f64) -> Volume {
    gaussian_blur(&mask.to_volume(spacing), blur)
}

pub fn preprocess_subject(
    mri: &Volume,
    frames: &FrameSequence,
    template_mri: &Volume,
    reference: &BrainMask,
    cfg: &PreprocessConfig,
) -> Result<PreprocessedSubject> {
    let spacing = mri.spacing_mm();
    let out_dims = template_mri.dims();
    let blur = cfg.registration_blur_vox;

    let native_mask = extract_brain_mask(mri)?;
    let native_mask_img = mask_image(&half_level_support(mri, &native_mask)?, spacing, blur);

    let mri_to_template = if cfg.register_mri_to_template {
        let template_mask = extract_brain_mask(template_mri)?;
        let template_support = half_level_support(template_mri, &template_mask)?;
        let fixed = mask_image(&template_support, template_mri.spacing_mm(), blur);
        register_affine(&native_mask_img, &fixed, &AffineTransform::identity(), &cfg.registration)?.transform
    } else {
        AffineTransform::identity()
    };

    let static_pet = sum_late_frames(frames, cfg.window_start_min)?;
    let pet_support = support_mask(&static_pet, cfg.pet_support_fraction)?;
    let moving = mask_image(&pet_support, static_pet.spacing_mm(), blur);
    let pet_registration = register_affine(&moving, &native_mask_img, &AffineTransform::identity(), &cfg.registration)?;
    let pet_to_mri = pet_registration.transform;

    let mask_vol = resample_with(&native_mask.to_volume(spacing), &mri_to_template, out_dims, Interpolation::Nearest)?;
    let mask = BrainMask::from_threshold(&mask_vol, 0.5);
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mri_t = mask.apply(&resample(mri, &mri_to_template, out_dims)?)?;
    let pet_t = resample(&static_pet, &mri_to_template.compose(&pet_to_mri), out_dims)?;
    let pet_suvr = mask.apply(&normalize_suvr(&pet_t, reference)?)?;
    debug_assert_eq!(pet_suvr.units(), Units::Suvr);

    Ok(PreprocessedSubject { mri: mri_t, pet_suvr, mask, mri_to_template, pet_to_mri, pet_registration })
}
