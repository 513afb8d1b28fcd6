//! Brain extraction: Otsu threshold, largest 6-connected component, then one
//! 3×3×3 closing.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::{Units, Volume};

const OTSU_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl BrainMask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!("mask dims {dims:?} vs {} bits", bits.len())));
        }
        Ok(Self { dims, bits })
    }

    /// Voxels of `vol` strictly above `threshold`.
    pub fn from_threshold(vol: &Volume, threshold: f64) -> Self {
        Self { dims: vol.dims(), bits: vol.voxels().iter().map(|&v| v > threshold).collect() }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Zeroes every voxel outside the mask.
    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        if vol.dims() != self.dims {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs volume {:?}", self.dims, vol.dims())));
        }
        let v = vol.voxels().iter().zip(&self.bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect();
        vol.with_voxels(v)
    }

    /// The mask as a 0/1 volume.
    pub fn to_volume(&self, spacing_mm: [f64; 3]) -> Volume {
        let v = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume::new(self.dims, spacing_mm, Units::Arbitrary, v).expect("mask dims are valid")
    }

    /// Axial plane `z` in the row-major `X × Y` layout of [`Volume::axial_plane`].
    pub fn axial_plane(&self, z: usize) -> Vec<bool> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                out.push(self.bits[(x * ny + y) * nz + z]);
            }
        }
        out
    }

    pub fn is_superset_of(&self, other: &BrainMask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// Number of 6-connected components.
    pub fn component_count(&self) -> usize {
        label_components(&self.bits, self.dims).1.len()
    }

    /// Keeps only the largest 6-connected component (lowest label on ties).
    pub fn largest_component(&self) -> Self {
        let (labels, sizes) = label_components(&self.bits, self.dims);
        let Some((best, _)) = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) else {
            return self.clone();
        };
        let bits = labels.iter().map(|&l| l == best + 1).collect();
        Self { dims: self.dims, bits }
    }

    pub fn dilate(&self) -> Self {
        self.morph(true)
    }

    /// Erosion that ignores out-of-field neighbours.
    pub fn erode(&self) -> Self {
        self.morph(false)
    }

    pub fn close(&self) -> Self {
        self.dilate().erode()
    }

    fn morph(&self, dilate: bool) -> Self {
        let [nx, ny, nz] = self.dims;
        let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
        let mut bits = vec![false; self.bits.len()];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let mut any = false;
                    let mut all = true;
                    for xx in x.saturating_sub(1)..(x + 2).min(nx) {
                        for yy in y.saturating_sub(1)..(y + 2).min(ny) {
                            for zz in z.saturating_sub(1)..(z + 2).min(nz) {
                                let b = self.bits[idx(xx, yy, zz)];
                                any |= b;
                                all &= b;
                            }
                        }
                    }
                    bits[idx(x, y, z)] = if dilate { any } else { all };
                }
            }
        }
        Self { dims: self.dims, bits }
    }
}

/// Labels 6-connected components (labels start at 1; 0 is background) and
/// returns the per-component sizes.
fn label_components(bits: &[bool], dims: [usize; 3]) -> (Vec<usize>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0usize; bits.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() + 1;
        let mut size = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
            let mut visit = |j: usize| {
                if bits[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - ny * nz);
            }
            if x + 1 < nx {
                visit(i + ny * nz);
            }
            if y > 0 {
                visit(i - nz);
            }
            if y + 1 < ny {
                visit(i + nz);
            }
            if z > 0 {
                visit(i - 1);
            }
            if z + 1 < nz {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Otsu's threshold over a 256-bin histogram spanning the value range.
/// Foreground is `value > threshold`.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0usize; OTSU_BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(OTSU_BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &c)| c as f64 * centre(b)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (b, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += c as f64 * centre(b);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, b);
        }
    }
    Some(lo + (best.1 + 1) as f64 * width)
}

/// Otsu threshold → largest 6-connected component → one 3×3×3 closing.
pub fn extract_brain_mask(vol: &Volume) -> Result<BrainMask> {
    let Some(threshold) = otsu_threshold(vol.voxels()) else {
        return Err(Error::EmptyMask);
    };
    let raw = BrainMask::from_threshold(vol, threshold);
    if raw.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(raw.largest_component().close())
}

/// Separable Gaussian blur with standard deviation `sigma_vox` voxels along
/// every axis; out-of-field samples count as zero.
pub fn gaussian_blur(vol: &Volume, sigma_vox: f64) -> Volume {
    blur_axes(vol, [sigma_vox; 3])
}

/// Gaussian blur with a physical standard deviation, converted per axis by
/// the voxel spacing.
pub fn gaussian_blur_mm(vol: &Volume, sigma_mm: f64) -> Volume {
    let s = vol.spacing_mm();
    blur_axes(vol, std::array::from_fn(|a| sigma_mm / s[a]))
}

fn blur_axes(vol: &Volume, sigma_vox: [f64; 3]) -> Volume {
    let dims = vol.dims();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut cur = vol.voxels().to_vec();
    for axis in 0..3 {
        let sigma = sigma_vox[axis];
        if sigma <= 0.0 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let mut next = vec![0.0; cur.len()];
        let n = dims[axis] as isize;
        let stride = strides[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let q = pos + k as isize - radius;
                if q >= 0 && q < n {
                    acc += w * cur[(i as isize + (q - pos) * stride as isize) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    vol.with_voxels(cur).expect("blur keeps the grid and sign")
}
