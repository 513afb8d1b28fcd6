//! 3-D scalar grids shared by the phantom, preprocessing and evaluation code.
//!
//! Voxels are stored row-major over `(x, y, z)`, so `z` varies fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "SUVR")]
    Suvr,
    #[serde(rename = "SUVR-difference")]
    SuvrDifference,
    #[serde(rename = "arbitrary")]
    Arbitrary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    units: Units,
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], units: Units, voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidDims(format!("{dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidDims(format!("spacing {spacing_mm:?}")));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} voxels, got {}",
                voxels.len()
            )));
        }
        if units == Units::Suvr && voxels.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidDims("SUVR volume with negative voxels".into()));
        }
        Ok(Self { dims, spacing_mm, units, voxels })
    }

    pub fn zeros(dims: [usize; 3], spacing_mm: [f64; 3], units: Units) -> Self {
        let n = dims.iter().product();
        Self { dims, spacing_mm, units, voxels: vec![0.0; n] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing_mm == other.spacing_mm
    }

    /// Same grid and units, new voxel values. Fails if the values violate the
    /// units invariant.
    pub fn with_voxels(&self, voxels: Vec<f64>) -> Result<Self> {
        Volume::new(self.dims, self.spacing_mm, self.units, voxels)
    }

    pub fn with_units(mut self, units: Units) -> Result<Self> {
        if units == Units::Suvr && self.voxels.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidDims("SUVR volume with negative voxels".into()));
        }
        self.units = units;
        Ok(self)
    }

    /// Physical position (mm) of a voxel centre, relative to the grid centre.
    pub fn voxel_to_mm(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - (self.dims[a] as f64 - 1.0) / 2.0) * self.spacing_mm[a])
    }

    pub fn mm_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| p[a] / self.spacing_mm[a] + (self.dims[a] as f64 - 1.0) / 2.0)
    }

    /// Trilinear interpolation at a continuous voxel coordinate; zero outside
    /// the field of view.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.dims;
        let (fx, fy, fz) = (p[0].floor(), p[1].floor(), p[2].floor());
        if !(fx >= -1.0 && fy >= -1.0 && fz >= -1.0 && fx < nx as f64 && fy < ny as f64 && fz < nz as f64) {
            return 0.0;
        }
        let (tx, ty, tz) = (p[0] - fx, p[1] - fy, p[2] - fz);
        let (x0, y0, z0) = (fx as isize, fy as isize, fz as isize);
        let (sx, sy) = ((ny * nz) as isize, nz as isize);
        let v = &self.voxels;
        if x0 >= 0 && y0 >= 0 && z0 >= 0 && x0 + 1 < nx as isize && y0 + 1 < ny as isize && z0 + 1 < nz as isize {
            let b = (x0 * sx + y0 * sy + z0) as usize;
            let (sx, sy) = (sx as usize, sy as usize);
            let c00 = v[b] * (1.0 - tz) + v[b + 1] * tz;
            let c01 = v[b + sy] * (1.0 - tz) + v[b + sy + 1] * tz;
            let c10 = v[b + sx] * (1.0 - tz) + v[b + sx + 1] * tz;
            let c11 = v[b + sx + sy] * (1.0 - tz) + v[b + sx + sy + 1] * tz;
            let c0 = c00 * (1.0 - ty) + c01 * ty;
            let c1 = c10 * (1.0 - ty) + c11 * ty;
            return c0 * (1.0 - tx) + c1 * tx;
        }
        let mut acc = 0.0;
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let x = x0 + dx;
            if wx == 0.0 || x < 0 || x >= nx as isize {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                let y = y0 + dy;
                if wy == 0.0 || y < 0 || y >= ny as isize {
                    continue;
                }
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    let z = z0 + dz;
                    if wz == 0.0 || z < 0 || z >= nz as isize {
                        continue;
                    }
                    acc += wx * wy * wz * v[(x * sx + y * sy + z) as usize];
                }
            }
        }
        acc
    }

    /// Trilinear value and its gradient (per voxel step) at a point inside
    /// `[0, dim − 1]` on every axis. On a lattice plane the gradient is the
    /// mean of the one-sided slopes. Axes of length one have zero gradient.
    pub fn sample_trilinear_grad(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            if self.dims[a] < 2 {
                continue;
            }
            let f = (p[a].floor().max(0.0) as usize).min(self.dims[a] - 2);
            base[a] = f;
            t[a] = p[a] - f as f64;
        }
        let (value, mut grad) = self.trilinear_cell(base, t);
        for a in 0..3 {
            if t[a] == 0.0 && base[a] > 0 {
                let (mut b, mut s) = (base, t);
                b[a] -= 1;
                s[a] = 1.0;
                grad[a] = 0.5 * (grad[a] + self.trilinear_cell(b, s).1[a]);
            }
        }
        (value, grad)
    }

    fn trilinear_cell(&self, base: [usize; 3], t: [f64; 3]) -> (f64, [f64; 3]) {
        let strides = [self.dims[1] * self.dims[2], self.dims[2], 1];
        let step: [usize; 3] = std::array::from_fn(|a| if self.dims[a] < 2 { 0 } else { strides[a] });
        let b = base[0] * strides[0] + base[1] * strides[1] + base[2];
        let v = &self.voxels;
        let (sx, sy, sz) = (step[0], step[1], step[2]);
        let c = [
            [[v[b], v[b + sz]], [v[b + sy], v[b + sy + sz]]],
            [[v[b + sx], v[b + sx + sz]], [v[b + sx + sy], v[b + sx + sy + sz]]],
        ];
        let [tx, ty, tz] = t;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let cz = |x: usize, y: usize| lerp(c[x][y][0], c[x][y][1], tz);
        let dz = |x: usize, y: usize| c[x][y][1] - c[x][y][0];
        let (c00, c01, c10, c11) = (cz(0, 0), cz(0, 1), cz(1, 0), cz(1, 1));
        let (c0, c1) = (lerp(c00, c01, ty), lerp(c10, c11, ty));
        let value = lerp(c0, c1, tx);
        let gx = c1 - c0;
        let gy = lerp(c01 - c00, c11 - c10, tx);
        let gz = lerp(lerp(dz(0, 0), dz(0, 1), ty), lerp(dz(1, 0), dz(1, 1), ty), tx);
        (value, [gx, gy, gz])
    }

    /// Value of the nearest voxel; zero outside the field of view.
    pub fn sample_nearest(&self, p: [f64; 3]) -> f64 {
        let idx: [isize; 3] = std::array::from_fn(|a| p[a].round() as isize);
        if (0..3).any(|a| idx[a] < 0 || idx[a] >= self.dims[a] as isize) {
            return 0.0;
        }
        self.get(idx[0] as usize, idx[1] as usize, idx[2] as usize)
    }

    /// Axial plane `z` as a row-major `X × Y` image.
    pub fn axial_plane(&self, z: usize) -> Vec<f64> {
        let [nx, ny, _] = self.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                out.push(self.get(x, y, z));
            }
        }
        out
    }
}

/// One axial plane, row-major `nx × ny`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialSlice {
    pub nx: usize,
    pub ny: usize,
    pub pixels: Vec<f64>,
}

impl AxialSlice {
    pub fn new(nx: usize, ny: usize, pixels: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || pixels.len() != nx * ny {
            return Err(Error::ShapeMismatch(format!("{nx}x{ny} slice with {} pixels", pixels.len())));
        }
        Ok(Self { nx, ny, pixels })
    }

    pub fn constant(nx: usize, ny: usize, value: f64) -> Self {
        Self { nx, ny, pixels: vec![value; nx * ny] }
    }
}

/// Time-ordered frames of a dynamic acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Volume>,
    start_min: Vec<f64>,
    end_min: Vec<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Volume>, start_min: Vec<f64>, end_min: Vec<f64>) -> Result<Self> {
        if frames.is_empty() || frames.len() != start_min.len() || frames.len() != end_min.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frames, {} start times, {} end times",
                frames.len(),
                start_min.len(),
                end_min.len()
            )));
        }
        if frames.iter().any(|f| !f.same_grid(&frames[0])) {
            return Err(Error::ShapeMismatch("frames on different grids".into()));
        }
        if start_min.windows(2).any(|w| w[1] <= w[0]) || start_min.iter().zip(&end_min).any(|(s, e)| e <= s) {
            return Err(Error::InvalidDims("frame timing must be strictly increasing".into()));
        }
        Ok(Self { frames, start_min, end_min })
    }

    pub fn frames(&self) -> &[Volume] {
        &self.frames
    }

    pub fn start_min(&self) -> &[f64] {
        &self.start_min
    }

    pub fn end_min(&self) -> &[f64] {
        &self.end_min
    }

    pub fn midpoint_min(&self, i: usize) -> f64 {
        0.5 * (self.start_min[i] + self.end_min[i])
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_construction() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], Units::Arbitrary, vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 0], [1.0; 3], Units::Arbitrary, vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], Units::Suvr, vec![-0.1]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], Units::Arbitrary, vec![0.0]).is_err());
    }

    #[test]
    fn trilinear_at_lattice_points_is_exact() {
        let v = Volume::new([2, 3, 4], [1.0; 3], Units::Arbitrary, (0..24).map(f64::from).collect()).unwrap();
        for x in 0..2 {
            for y in 0..3 {
                for z in 0..4 {
                    assert_eq!(v.sample_trilinear([x as f64, y as f64, z as f64]), v.get(x, y, z));
                }
            }
        }
        assert_eq!(v.sample_trilinear([0.5, 0.0, 0.0]), 6.0);
        assert_eq!(v.sample_trilinear([-2.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn mm_roundtrip() {
        let v = Volume::zeros([8, 6, 4], [2.0, 1.5, 3.0], Units::Arbitrary);
        let p = [1.25, 4.0, 2.5];
        let back = v.mm_to_voxel(v.voxel_to_mm(p));
        for a in 0..3 {
            assert!((back[a] - p[a]).abs() < 1e-12);
        }
    }
}
