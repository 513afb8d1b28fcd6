//! Paired synthetic brain phantoms.
//!
//! Each subject is a star-shaped brain with a white-matter core, a cortical
//! gray ribbon and two lateral ventricles. Atrophy thins the ribbon, dims
//! gray-matter contrast on the MRI and dilates the ventricles. Amyloid burden
//! couples to atrophy and raises cortical tracer uptake on the PET, giving the
//! translator a structural cue for a molecular signal.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{gaussian_blur_mm, AffineTransform, BrainMask};
use crate::rng::{derive_seed, rng_from};
pub use crate::volume::{FrameSequence, Units, Volume};

pub const MIN_DIM: usize = 16;

/// Relative depth of the gyral folding on the outline. Folding is what pins
/// down rotations when registering; a smooth ovoid barely constrains them.
const FOLD_DEPTH: f64 = 0.10;

/// Frame schedule of the 60-minute dynamic acquisition, in minutes.
pub const FRAME_STARTS_MIN: [f64; 9] = [0.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0];
pub const FRAME_ENDS_MIN: [f64; 9] = [2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Impairment {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "impaired")]
    Impaired,
    #[serde(rename = "AD")]
    Ad,
}

impl Impairment {
    pub const ALL: [Impairment; 3] = [Impairment::Cn, Impairment::Impaired, Impairment::Ad];

    /// Burden offset before the atrophy term.
    pub fn base_burden(self) -> f64 {
        match self {
            Impairment::Cn => 0.1,
            Impairment::Impaired => 0.8,
            Impairment::Ad => 1.5,
        }
    }

    /// Atrophy interval sampled for this class.
    pub fn atrophy_range(self) -> (f64, f64) {
        match self {
            Impairment::Cn => (0.0, 0.3),
            Impairment::Impaired => (0.3, 0.6),
            Impairment::Ad => (0.6, 0.9),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::F => "F",
            Sex::M => "M",
        })
    }
}

impl fmt::Display for Impairment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Impairment::Cn => "CN",
            Impairment::Impaired => "impaired",
            Impairment::Ad => "AD",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    pub sex: Sex,
    pub impairment: Impairment,
    pub age_factor: f64,
    pub atrophy: f64,
    pub burden: f64,
    pub seed: u64,
}

impl SubjectRecord {
    /// Draws covariates for one subject. Atrophy is placed inside the class
    /// interval, pushed up by age; burden follows
    /// `clip(base + 0.8·atrophy + N(0, 0.1), 0, burden_max)`.
    pub fn sample(id: impl Into<String>, sex: Sex, impairment: Impairment, seed: u64, burden_max: f64) -> Self {
        let mut rng = rng_from(derive_seed(&[seed, 1]));
        let age_factor: f64 = rng.random();
        let u: f64 = rng.random();
        let (lo, hi) = impairment.atrophy_range();
        let atrophy = lo + (hi - lo) * (0.5 * age_factor + 0.5 * u);
        let noise = Normal::new(0.0, 0.1).expect("valid normal").sample(&mut rng);
        let burden = burden_from(impairment, atrophy, noise, burden_max);
        Self { id: id.into(), sex, impairment, age_factor, atrophy, burden, seed }
    }
}

/// Deterministic part of the burden model plus an explicit noise draw.
pub fn burden_from(impairment: Impairment, atrophy: f64, noise: f64, burden_max: f64) -> f64 {
    (impairment.base_burden() + 0.8 * atrophy + noise).clamp(0.0, burden_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Cortical SUVR is `1 + uptake_gain·burden`.
    pub uptake_gain: f64,
    pub burden_max: f64,
    /// Apply a random affine offset to the PET frames.
    pub misalign: bool,
    /// Per-axis translation bound of the offset, in voxels.
    pub max_translation_vox: [f64; 3],
    /// Bound on diagonal (scale) deviations of the offset's linear part.
    pub max_scale: f64,
    /// Bound on off-diagonal (shear) entries of the offset's linear part.
    pub max_shear: f64,
    pub mri_noise: f64,
    pub pet_noise: f64,
    /// Full width at half maximum of the PET point-spread function.
    pub pet_psf_fwhm_mm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 16],
            spacing_mm: [2.0; 3],
            uptake_gain: 1.0,
            burden_max: 2.0,
            misalign: true,
            max_translation_vox: [3.0, 3.0, 1.0],
            max_scale: 0.05,
            max_shear: 0.03,
            mri_noise: 0.015,
            pet_noise: 0.01,
            pet_psf_fwhm_mm: 4.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::InvalidDims(format!("phantom dims {:?} below {MIN_DIM}", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidDims(format!("spacing {:?}", self.spacing_mm)));
        }
        if !(self.pet_psf_fwhm_mm >= 0.0) {
            return Err(Error::InvalidHyperparam(format!("PET PSF FWHM {}", self.pet_psf_fwhm_mm)));
        }
        if !(self.uptake_gain > 0.0 && self.burden_max > 0.0) {
            return Err(Error::InvalidHyperparam("uptake_gain and burden_max must be positive".into()));
        }
        Ok(())
    }

    /// Largest SUVR the uptake model produces: `1 + uptake_gain·burden_max`.
    pub fn max_suvr(&self) -> f64 {
        1.0 + self.uptake_gain * self.burden_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tissue {
    Background,
    Ventricle,
    White,
    Gray,
}

/// Normalised position of a voxel: the brain outline is `radial < 1`.
#[derive(Clone, Copy, Debug)]
struct Position {
    u: f64,
    v: f64,
    w: f64,
    /// Radius relative to the direction-dependent outline.
    radial: f64,
}

fn position(dims: [usize; 3], x: usize, y: usize, z: usize) -> Position {
    position_at(dims, [x as f64, y as f64, z as f64])
}

/// Position of a continuous voxel coordinate.
fn position_at(dims: [usize; 3], p: [f64; 3]) -> Position {
    let semi = [0.30 * dims[0] as f64, 0.34 * dims[1] as f64, 0.33 * dims[2] as f64];
    let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let u = (p[0] - c[0]) / semi[0];
    let v = (p[1] - c[1]) / semi[1];
    let w = (p[2] - c[2]) / semi[2];
    let rho = (u * u + v * v + w * w).sqrt();
    let radial = if rho == 0.0 {
        0.0
    } else {
        let (du, dv, dw) = (u / rho, v / rho, w / rho);
        // Odd, mixed harmonics so the outline has no affine self-symmetry.
        let outline = 1.0 + 0.12 * dv * (du * du - dw * dw) + 0.10 * dw * (dv * dv - 0.2) + 0.06 * du * dv * dw
            + FOLD_DEPTH * (7.0 * du + 5.0 * dv).sin() * (6.0 * dw + 1.0).cos();
        rho / outline
    };
    Position { u, v, w, radial }
}

fn ribbon_inner(atrophy: f64) -> f64 {
    1.0 - 0.24 * (1.0 - 0.5 * atrophy)
}

fn in_ventricle(p: &Position, atrophy: f64, inflate: f64) -> bool {
    let g = (1.0 + 0.8 * atrophy) * inflate;
    let (a, b, c) = (0.10 * g, 0.32 * g, 0.30 * g);
    [-0.2, 0.2].iter().any(|&cu| {
        let (du, dv, dw) = ((p.u - cu) / a, (p.v - 0.05) / b, (p.w - 0.15) / c);
        du * du + dv * dv + dw * dw <= 1.0
    })
}

fn tissue_at(p: &Position, atrophy: f64) -> Tissue {
    if p.radial >= 1.0 {
        Tissue::Background
    } else if p.radial >= ribbon_inner(atrophy) {
        Tissue::Gray
    } else if in_ventricle(p, atrophy, 1.0) {
        Tissue::Ventricle
    } else {
        Tissue::White
    }
}

/// Tissue label of every voxel, row-major `(x, y, z)`.
pub fn tissue_labels(dims: [usize; 3], atrophy: f64) -> Vec<Tissue> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                out.push(tissue_at(&position(dims, x, y, z), atrophy));
            }
        }
    }
    out
}

/// White matter that stays white at every atrophy level, with a margin. Serves
/// as the SUVR reference region in template space.
pub fn reference_region(dims: [usize; 3]) -> BrainMask {
    let mut bits = Vec::with_capacity(dims.iter().product());
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = position(dims, x, y, z);
                bits.push(p.radial < ribbon_inner(0.0) - 0.06 && !in_ventricle(&p, 1.0, 1.2));
            }
        }
    }
    BrainMask::new(dims, bits).expect("dims match")
}

/// Everything a phantom subject produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPhantom {
    pub mri: Volume,
    pub pet_frames: FrameSequence,
    /// Exact brain support (tissue label ≠ background) as a 0/1 volume.
    pub truth_mask: Volume,
    pub labels: Vec<Tissue>,
    /// Offset applied to the PET frames (identity when disabled).
    pub misalignment: AffineTransform,
}

/// Tracer time-activity: specific binding `s·C(t)` plus a perfusion bolus
/// `q·P(t)` that has washed out before the late window. Returns the integral
/// over `[t0, t1]` of `C` and of `P`.
fn tac_integrals(t0: f64, t1: f64) -> (f64, f64) {
    // C(t) = (1 - e^{-t/4}) e^{-t/90}, P(t) = 3 e^{-t/3}
    let a = 1.0 / 90.0;
    let b = 1.0 / 4.0 + 1.0 / 90.0;
    let prim_c = |t: f64| -(-a * t).exp() / a + (-b * t).exp() / b;
    let prim_p = |t: f64| -9.0 * (-t / 3.0).exp();
    (prim_c(t1) - prim_c(t0), prim_p(t1) - prim_p(t0))
}

struct Uptake {
    suvr: f64,
    perfusion: f64,
}

fn uptake(tissue: Tissue, p: &Position, record: &SubjectRecord, cfg: &PhantomConfig) -> Uptake {
    match tissue {
        Tissue::Gray => Uptake { suvr: 1.0 + cfg.uptake_gain * record.burden, perfusion: 1.0 },
        Tissue::White => Uptake { suvr: 1.0, perfusion: 0.6 },
        Tissue::Ventricle => Uptake { suvr: 0.75, perfusion: 0.2 },
        Tissue::Background if p.radial < 1.3 => {
            // scatter halo around the head
            let f = 1.0 - (p.radial - 1.0) / 0.3;
            Uptake { suvr: 0.05 * f, perfusion: 0.02 * f }
        }
        Tissue::Background => Uptake { suvr: 0.0, perfusion: 0.0 },
    }
}

pub fn generate_subject(record: &SubjectRecord, cfg: &PhantomConfig) -> Result<SubjectPhantom> {
    cfg.validate()?;
    let dims = cfg.dims;
    let n = dims.iter().product::<usize>();
    let labels = tissue_labels(dims, record.atrophy);

    // MRI
    let mut rng = rng_from(derive_seed(&[record.seed, 2]));
    let gain = 1.0 + 0.02 * Normal::new(0.0, 1.0).expect("valid").sample(&mut rng);
    let mri_noise = Normal::new(0.0, cfg.mri_noise.max(0.0) + f64::MIN_POSITIVE).expect("valid");
    let gray_level = 0.62 - 0.12 * record.atrophy;
    let identity = AffineTransform::identity();
    let mri: Vec<f64> = render(dims, cfg.spacing_mm, &identity, 0.0, |p| {
        let base = match tissue_at(p, record.atrophy) {
            Tissue::Background => 0.0,
            Tissue::Ventricle => 0.45,
            Tissue::Gray => gray_level,
            Tissue::White => 0.92,
        };
        [base, 0.0]
    })?
    .into_iter()
    .map(|[base, _]| {
        let noise = mri_noise.sample(&mut rng);
        if base == 0.0 {
            (0.5 * noise).abs()
        } else {
            gain * base + noise
        }
    })
    .collect();
    let mri = Volume::new(dims, cfg.spacing_mm, Units::Arbitrary, mri)?;

    let truth = labels.iter().map(|&t| if t == Tissue::Background { 0.0 } else { 1.0 }).collect();
    let truth_mask = Volume::new(dims, cfg.spacing_mm, Units::Arbitrary, truth)?;

    // PET frames
    let mut rng = rng_from(derive_seed(&[record.seed, 3]));
    let dose: f64 = rng.random_range(0.7..1.3);
    let pet_noise = Normal::new(0.0, cfg.pet_noise.max(0.0) + f64::MIN_POSITIVE).expect("valid");
    let misalignment = if cfg.misalign { sample_misalignment(record.seed, cfg) } else { AffineTransform::identity() };
    // The offset PET is rendered from the continuous anatomy rather than
    // resampled, so it carries no interpolation blur.
    let pull = misalignment.inverse()?;
    let sigma_mm = cfg.pet_psf_fwhm_mm / (8.0 * std::f64::consts::LN_2).sqrt();
    let uptakes = render(dims, cfg.spacing_mm, &pull, sigma_mm, |p| {
        let u = uptake(tissue_at(p, record.atrophy), p, record, cfg);
        [u.suvr, u.perfusion]
    })?;
    let mut frames = Vec::with_capacity(FRAME_STARTS_MIN.len());
    for (&t0, &t1) in FRAME_STARTS_MIN.iter().zip(&FRAME_ENDS_MIN) {
        let (ic, ip) = tac_integrals(t0, t1);
        let mut counts = Vec::with_capacity(n);
        for &[suvr, perfusion] in &uptakes {
            let clean = dose * (suvr * ic + perfusion * ip);
            counts.push((clean * (1.0 + pet_noise.sample(&mut rng))).max(0.0));
        }
        frames.push(Volume::new(dims, cfg.spacing_mm, Units::Arbitrary, counts)?);
    }
    let pet_frames = FrameSequence::new(frames, FRAME_STARTS_MIN.to_vec(), FRAME_ENDS_MIN.to_vec())?;

    Ok(SubjectPhantom { mri, pet_frames, truth_mask, labels, misalignment })
}

/// Sub-samples per axis when rendering voxel values.
const SUPERSAMPLE: usize = 3;

/// Renders `f` on a grid `SUPERSAMPLE` times finer than `dims`, every sample
/// point pulled through `pull` (mm about the grid centre), optionally blurs it
/// with a Gaussian of `sigma_mm`, and box-averages back to `dims`.
fn render(
    dims: [usize; 3],
    spacing: [f64; 3],
    pull: &AffineTransform,
    sigma_mm: f64,
    f: impl Fn(&Position) -> [f64; 2],
) -> Result<Vec<[f64; 2]>> {
    let s = SUPERSAMPLE;
    let fine_dims = dims.map(|d| d * s);
    let fine_spacing = spacing.map(|v| v / s as f64);
    let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let mut channels = [Vec::with_capacity(fine_dims.iter().product()), Vec::with_capacity(fine_dims.iter().product())];
    for x in 0..fine_dims[0] {
        for y in 0..fine_dims[1] {
            for z in 0..fine_dims[2] {
                let fine = [x, y, z];
                let q: [f64; 3] = std::array::from_fn(|a| (fine[a] as f64 + 0.5) / s as f64 - 0.5);
                let mm = pull.apply(std::array::from_fn(|a| (q[a] - c[a]) * spacing[a]));
                let v = f(&position_at(dims, std::array::from_fn(|a| mm[a] / spacing[a] + c[a])));
                channels[0].push(v[0]);
                channels[1].push(v[1]);
            }
        }
    }
    let mut coarse = vec![[0.0; 2]; dims.iter().product()];
    let norm = (s * s * s) as f64;
    for (ch, values) in channels.into_iter().enumerate() {
        let mut vol = Volume::new(fine_dims, fine_spacing, Units::Arbitrary, values)?;
        if sigma_mm > 0.0 {
            vol = gaussian_blur_mm(&vol, sigma_mm);
        }
        let v = vol.voxels();
        for x in 0..fine_dims[0] {
            for y in 0..fine_dims[1] {
                for z in 0..fine_dims[2] {
                    let i = ((x / s) * dims[1] + y / s) * dims[2] + z / s;
                    coarse[i][ch] += v[(x * fine_dims[1] + y) * fine_dims[2] + z] / norm;
                }
            }
        }
    }
    Ok(coarse)
}

fn sample_misalignment(seed: u64, cfg: &PhantomConfig) -> AffineTransform {
    let mut rng = rng_from(derive_seed(&[seed, 4]));
    let mut sym = |bound: f64| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
    let mut matrix = [[0.0; 3]; 3];
    for (i, row) in matrix.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { 1.0 + sym(cfg.max_scale) } else { sym(cfg.max_shear) };
        }
    }
    let translation_mm = std::array::from_fn(|a| sym(cfg.max_translation_vox[a]) * cfg.spacing_mm[a]);
    AffineTransform { matrix, translation_mm }
}

/// The canonical mid-atrophy subject that defines template space.
pub fn template_record(burden_max: f64) -> SubjectRecord {
    let atrophy = 0.45;
    SubjectRecord {
        id: "template".into(),
        sex: Sex::F,
        impairment: Impairment::Impaired,
        age_factor: 0.5,
        atrophy,
        burden: burden_from(Impairment::Impaired, atrophy, 0.0, burden_max),
        seed: 0x7E4D_1A7E,
    }
}

/// Template MRI (no PET offset).
pub fn template_mri(cfg: &PhantomConfig) -> Result<Volume> {
    let cfg = PhantomConfig { misalign: false, ..cfg.clone() };
    Ok(generate_subject(&template_record(cfg.burden_max), &cfg)?.mri)
}

/// Target fractions for the sex and impairment covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataProportions {
    pub sex: BTreeMap<Sex, f64>,
    pub impairment: BTreeMap<Impairment, f64>,
}

impl Default for StrataProportions {
    fn default() -> Self {
        Self {
            sex: [(Sex::F, 0.5), (Sex::M, 0.5)].into_iter().collect(),
            impairment: [(Impairment::Cn, 0.6), (Impairment::Impaired, 0.2), (Impairment::Ad, 0.2)]
                .into_iter()
                .collect(),
        }
    }
}

impl StrataProportions {
    pub fn validate(&self) -> Result<()> {
        for (name, total, any_negative) in [
            ("sex", self.sex.values().sum::<f64>(), self.sex.values().any(|&p| !(p >= 0.0))),
            (
                "impairment",
                self.impairment.values().sum::<f64>(),
                self.impairment.values().any(|&p| !(p >= 0.0)),
            ),
        ] {
            if any_negative || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidProportions(format!("{name} proportions sum to {total}")));
            }
        }
        Ok(())
    }

    /// Joint (sex × impairment) strata with their target fractions.
    pub fn joint(&self) -> Vec<((Sex, Impairment), f64)> {
        let mut out = Vec::new();
        for (&s, &ps) in &self.sex {
            for (&i, &pi) in &self.impairment {
                out.push(((s, i), ps * pi));
            }
        }
        out
    }
}

/// Stratum label used for tie-breaking, e.g. `F/CN`.
pub fn stratum_name(sex: Sex, impairment: Impairment) -> String {
    format!("{sex}/{impairment}")
}

/// Hamilton (largest-remainder) apportionment of `total` over `weights`;
/// ties in the remainder go to the lexicographically smaller name.
pub fn largest_remainder(total: usize, weights: &[(String, f64)]) -> Vec<usize> {
    let sum: f64 = weights.iter().map(|(_, w)| w).sum();
    let quotas: Vec<f64> = weights.iter().map(|(_, w)| if sum > 0.0 { total as f64 * w / sum } else { 0.0 }).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - counts[a] as f64, quotas[b] - counts[b] as f64);
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| if (ra - rb).abs() < 1e-12 { weights[a].0.cmp(&weights[b].0) } else { std::cmp::Ordering::Equal })
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws `n` subject records whose joint (sex × impairment) counts follow the
/// proportions by largest remainder. Ids are `sub-0001…` in a seeded order.
pub fn generate_cohort(
    n: usize,
    proportions: &StrataProportions,
    seed: u64,
    burden_max: f64,
) -> Result<Vec<SubjectRecord>> {
    if n == 0 {
        return Err(Error::InvalidProportions("cohort size must be at least 1".into()));
    }
    proportions.validate()?;
    let joint = proportions.joint();
    let named: Vec<(String, f64)> = joint.iter().map(|((s, i), p)| (stratum_name(*s, *i), *p)).collect();
    let counts = largest_remainder(n, &named);
    let mut slots: Vec<(Sex, Impairment)> = Vec::with_capacity(n);
    for (((s, i), _), &c) in joint.iter().zip(&counts) {
        slots.extend(std::iter::repeat_n((*s, *i), c));
    }
    let mut rng = rng_from(derive_seed(&[seed, 0xC0]));
    slots.shuffle(&mut rng);
    let width = n.to_string().len().max(4);
    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(k, (sex, imp))| {
            let id = format!("sub-{:0width$}", k + 1);
            SubjectRecord::sample(id, sex, imp, derive_seed(&[seed, k as u64]), burden_max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(burden: f64, atrophy: f64, seed: u64) -> SubjectRecord {
        SubjectRecord {
            id: "s".into(),
            sex: Sex::F,
            impairment: Impairment::Cn,
            age_factor: 0.5,
            atrophy,
            burden,
            seed,
        }
    }

    #[test]
    fn tac_late_window_is_dominated_by_binding() {
        let (ic, ip) = tac_integrals(30.0, 60.0);
        assert!(ic > 10.0);
        assert!(ip / ic < 1e-4);
    }

    #[test]
    fn dims_below_minimum_rejected() {
        let cfg = PhantomConfig { dims: [64, 64, 8], ..Default::default() };
        assert!(matches!(generate_subject(&record(0.0, 0.0, 1), &cfg), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn largest_remainder_matches_quotas() {
        let w: Vec<(String, f64)> = vec![("a".into(), 0.3), ("b".into(), 0.3), ("c".into(), 0.4)];
        assert_eq!(largest_remainder(10, &w), vec![3, 3, 4]);
        assert_eq!(largest_remainder(1, &w), vec![0, 0, 1]);
        assert_eq!(largest_remainder(2, &w), vec![1, 0, 1]);
    }

    #[test]
    fn proportions_must_sum_to_one() {
        let mut p = StrataProportions::default();
        p.sex.insert(Sex::M, 0.6);
        assert!(matches!(generate_cohort(10, &p, 1, 2.0), Err(Error::InvalidProportions(_))));
    }

    #[test]
    fn reference_region_is_white_at_all_atrophy_levels() {
        let dims = [64, 64, 16];
        let reference = reference_region(dims);
        assert!(reference.count() > 500);
        for atrophy in [0.0, 0.5, 1.0] {
            let labels = tissue_labels(dims, atrophy);
            assert!(reference.bits().iter().zip(&labels).all(|(&r, &t)| !r || t == Tissue::White));
        }
    }
}
