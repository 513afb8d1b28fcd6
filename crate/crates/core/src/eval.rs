//! Image-quality and quantification metrics for synthetic PET.
//!
//! SSIM and PSNR use a fixed cohort-wide data range rather than a per-image
//! maximum, so a model that gets the SUVR scale wrong is penalised.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, Checkpoint, GeneratorConfig};
use crate::preprocess::{BrainMask, PreprocessedSubject};
use crate::tensor::{ModelParams, Tensor};
use crate::volume::{Units, Volume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const HISTOGRAM_BINS: usize = 20;

fn check_pair(x: &[f64], y: &[f64], mask: &[bool], data_range: f64) -> Result<()> {
    if x.len() != y.len() || x.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("{} / {} / {} pixels", x.len(), y.len(), mask.len())));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidRange(data_range));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Normalised 1D Gaussian taps, centre at index `SSIM_WINDOW / 2`.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Weighted local means of `img` with the window clipped at the borders and
/// renormalised over what remains.
fn local_mean(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                let (pos, len) = if along_rows { (i as isize, h as isize) } else { (j as isize, w as isize) };
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let q = pos + k as isize - r;
                    if q < 0 || q >= len {
                        continue;
                    }
                    let idx = if along_rows { q as usize * w + j } else { i * w + q as usize };
                    acc += t * src[idx];
                    norm += t;
                }
                out[i * w + j] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Windowed SSIM (11×11 Gaussian, σ 1.5) of the masked images, averaged
/// over windows centred inside the mask. Pixels outside the mask count as
/// zero in both images, so only the masked content matters.
pub fn ssim(x: &[f64], y: &[f64], mask: &[bool], height: usize, width: usize, data_range: f64) -> Result<f64> {
    check_pair(x, y, mask, data_range)?;
    if height * width != x.len() {
        return Err(Error::ShapeMismatch(format!("{height}x{width} vs {} pixels", x.len())));
    }
    let keep = |v: &[f64]| -> Vec<f64> { v.iter().zip(mask).map(|(&a, &m)| if m { a } else { 0.0 }).collect() };
    let (x, y) = (keep(x), keep(y));
    let taps = gaussian_taps();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = local_mean(&x, height, width, &taps);
    let my = local_mean(&y, height, width, &taps);
    let mxx = local_mean(&prod(&x, &x), height, width, &taps);
    let myy = local_mean(&prod(&y, &y), height, width, &taps);
    let mxy = local_mean(&prod(&x, &y), height, width, &taps);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..x.len() {
        if !mask[i] {
            continue;
        }
        let (ux, uy) = (mx[i], my[i]);
        let vx = (mxx[i] - ux * ux).max(0.0);
        let vy = (myy[i] - uy * uy).max(0.0);
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        count += 1;
    }
    Ok(total / count as f64)
}

/// `10·log10(range² / masked MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[f64], y: &[f64], mask: &[bool], data_range: f64) -> Result<f64> {
    check_pair(x, y, mask, data_range)?;
    let (mut sse, mut n) = (0.0, 0usize);
    for ((a, b), &m) in x.iter().zip(y).zip(mask) {
        if m {
            sse += (a - b) * (a - b);
            n += 1;
        }
    }
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean value inside the mask.
pub fn global_suvr(values: &[f64], mask: &[bool]) -> Result<f64> {
    if values.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("{} values, {} mask bits", values.len(), mask.len())));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(s / n as f64)
}

/// Coefficient of determination of predicted against true: `1 − SS_res/SS_tot`.
pub fn r_squared(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateData(format!("{} pairs", pairs.len())));
    }
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let ss_tot: f64 = pairs.iter().map(|p| (p.0 - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateData("all true values are equal".into()));
    }
    let ss_res: f64 = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// `synth − true` inside the mask, zero outside, in SUVR-difference units.
pub fn difference_map(truth: &Volume, synth: &Volume, mask: &BrainMask) -> Result<Volume> {
    if !truth.same_grid(synth) || truth.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!(
            "true {:?}, synthetic {:?}, mask {:?}",
            truth.dims(),
            synth.dims(),
            mask.dims()
        )));
    }
    let v = truth
        .voxels()
        .iter()
        .zip(synth.voxels())
        .zip(mask.bits())
        .map(|((&t, &s), &m)| if m { s - t } else { 0.0 })
        .collect();
    Volume::new(truth.dims(), truth.spacing_mm(), Units::SuvrDifference, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub subject_id: String,
    pub ssim: f64,
    pub psnr_db: f64,
    pub suvr_true: f64,
    pub suvr_synth: f64,
}

/// SSIM and PSNR per axial slice with a nonempty mask, averaged with weights
/// equal to the mask area of each slice; global SUVR over the whole mask.
pub fn volume_metrics(id: &str, truth: &Volume, synth: &Volume, mask: &BrainMask, data_range: f64) -> Result<MetricsRecord> {
    if !truth.same_grid(synth) || truth.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!("true {:?} vs synthetic {:?}", truth.dims(), synth.dims())));
    }
    let [nx, ny, nz] = truth.dims();
    let (mut ssim_sum, mut psnr_sum, mut weight) = (0.0, 0.0, 0.0);
    for z in 0..nz {
        let m = mask.axial_plane(z);
        let area = m.iter().filter(|&&b| b).count();
        if area == 0 {
            continue;
        }
        let (a, b) = (truth.axial_plane(z), synth.axial_plane(z));
        ssim_sum += area as f64 * ssim(&a, &b, &m, nx, ny, data_range)?;
        psnr_sum += area as f64 * psnr(&a, &b, &m, data_range)?;
        weight += area as f64;
    }
    if weight == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(MetricsRecord {
        subject_id: id.to_string(),
        ssim: ssim_sum / weight,
        psnr_db: psnr_sum / weight,
        suvr_true: global_suvr(truth.voxels(), mask.bits())?,
        suvr_synth: global_suvr(synth.voxels(), mask.bits())?,
    })
}

/// Runs the generator on every axial slice of `mri` and zeroes the result
/// outside `mask`. Negative outputs (possible with a linear head) clamp to 0.
pub fn synthesize(config: &GeneratorConfig, params: &ModelParams, mri: &Volume, mask: &BrainMask) -> Result<Volume> {
    let [nx, ny, nz] = mri.dims();
    let mut data = Vec::with_capacity(mri.len());
    for z in 0..nz {
        data.extend(mri.axial_plane(z));
    }
    let out = generate(config, params, &Tensor::new(vec![nz, 1, nx, ny], data)?)?;
    let plane = nx * ny;
    let mut v = vec![0.0; mri.len()];
    for z in 0..nz {
        for p in 0..plane {
            let i = p * nz + z;
            if mask.bits()[i] {
                v[i] = out.data()[z * plane + p].max(0.0);
            }
        }
    }
    Volume::new(mri.dims(), mri.spacing_mm(), Units::Suvr, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over the observed range; a degenerate range is widened by
/// half a unit each way.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let (mut lo, mut hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if values.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if hi <= lo {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * width }).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub records: Vec<MetricsRecord>,
    pub ssim_histogram: Histogram,
    pub psnr_histogram: Histogram,
    pub r_squared: f64,
    pub ssim: Summary,
    pub psnr_db: Summary,
    pub suvr_true: Summary,
    pub suvr_synth: Summary,
}

impl CohortReport {
    pub fn from_records(records: Vec<MetricsRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::DegenerateData("no records".into()));
        }
        let col = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
        let (s, p) = (col(|r| r.ssim), col(|r| r.psnr_db));
        let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.suvr_true, r.suvr_synth)).collect();
        Ok(Self {
            ssim_histogram: histogram(&s, HISTOGRAM_BINS),
            psnr_histogram: histogram(&p, HISTOGRAM_BINS),
            r_squared: r_squared(&pairs)?,
            ssim: summarize(&s),
            psnr_db: summarize(&p),
            suvr_true: summarize(&col(|r| r.suvr_true)),
            suvr_synth: summarize(&col(|r| r.suvr_synth)),
            records,
        })
    }

    /// One row per subject: `subject_id,ssim,psnr_db,suvr_true,suvr_synth`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,ssim,psnr_db,suvr_true,suvr_synth\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.subject_id, r.ssim, r.psnr_db, r.suvr_true, r.suvr_synth);
        }
        out
    }
}

/// Synthesizes every test subject with the checkpoint's generator and scores
/// it against its preprocessed PET.
pub fn evaluate_cohort(
    ckpt: &Checkpoint,
    test_ids: &[String],
    subjects: &BTreeMap<String, PreprocessedSubject>,
    data_range: f64,
) -> Result<CohortReport> {
    let mut records = Vec::with_capacity(test_ids.len());
    for id in test_ids {
        let s = subjects.get(id).ok_or_else(|| Error::MissingSubjectData(id.clone()))?;
        let synth = synthesize(&ckpt.generator_config, &ckpt.generator, &s.mri, &s.mask)?;
        records.push(volume_metrics(id, &s.pet_suvr, &synth, &s.mask, data_range)?);
    }
    CohortReport::from_records(records)
}
