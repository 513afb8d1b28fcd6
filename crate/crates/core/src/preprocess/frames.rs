use super::mask::BrainMask;
use crate::error::{Error, Result};
use crate::volume::{AxialSlice, FrameSequence, Units, Volume};

/// Voxelwise sum of every frame whose midpoint lies at or after
/// `window_start_min`. The result is in arbitrary (count) units.
pub fn sum_late_frames(frames: &FrameSequence, window_start_min: f64) -> Result<Volume> {
    let mut qualifying = (0..frames.len()).filter(|&i| frames.midpoint_min(i) >= window_start_min);
    let Some(first) = qualifying.next() else {
        return Err(Error::NoQualifyingFrames { window_start_min });
    };
    let mut acc = frames.frames()[first].voxels().to_vec();
    for i in qualifying {
        acc.iter_mut().zip(frames.frames()[i].voxels()).for_each(|(a, v)| *a += v);
    }
    let template = &frames.frames()[first];
    Volume::new(template.dims(), template.spacing_mm(), Units::Arbitrary, acc)
}

/// Divides by the mean inside `reference` and tags the result SUVR.
/// Negative values (noise) are clipped to zero.
pub fn normalize_suvr(vol: &Volume, reference: &BrainMask) -> Result<Volume> {
    if reference.dims() != vol.dims() {
        return Err(Error::ShapeMismatch(format!("reference {:?} vs volume {:?}", reference.dims(), vol.dims())));
    }
    let n = reference.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = vol.voxels().iter().zip(reference.bits()).filter(|(_, &b)| b).map(|(v, _)| v).sum::<f64>() / n as f64;
    if !(mean > 0.0) {
        return Err(Error::DegenerateData(format!("reference region mean {mean}")));
    }
    let v = vol.voxels().iter().map(|&x| (x / mean).max(0.0)).collect();
    Volume::new(vol.dims(), vol.spacing_mm(), Units::Suvr, v)
}

/// The `Z` axial planes of `vol`, in order.
pub fn slice_axial(vol: &Volume) -> Vec<AxialSlice> {
    let [nx, ny, nz] = vol.dims();
    (0..nz).map(|z| AxialSlice { nx, ny, pixels: vol.axial_plane(z) }).collect()
}

/// Inverse of [`slice_axial`].
pub fn stack_axial(slices: &[AxialSlice], spacing_mm: [f64; 3], units: Units) -> Result<Volume> {
    let Some(first) = slices.first() else {
        return Err(Error::InvalidDims("no slices".into()));
    };
    let (nx, ny, nz) = (first.nx, first.ny, slices.len());
    if slices.iter().any(|s| s.nx != nx || s.ny != ny) {
        return Err(Error::ShapeMismatch("slices of different sizes".into()));
    }
    let mut v = vec![0.0; nx * ny * nz];
    for (z, s) in slices.iter().enumerate() {
        for (p, &val) in s.pixels.iter().enumerate() {
            v[p * nz + z] = val;
        }
    }
    Volume::new([nx, ny, nz], spacing_mm, units, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(value: f64) -> Volume {
        Volume::new([2, 2, 2], [1.0; 3], Units::Arbitrary, vec![value; 8]).unwrap()
    }

    fn seq(mids: &[f64]) -> FrameSequence {
        let frames = mids.iter().enumerate().map(|(i, _)| constant(10f64.powi(i as i32))).collect();
        FrameSequence::new(frames, mids.iter().map(|m| m - 1.0).collect(), mids.iter().map(|m| m + 1.0).collect())
            .unwrap()
    }

    #[test]
    fn only_late_midpoints_are_summed() {
        let s = seq(&[10.0, 25.0, 40.0, 55.0]);
        let out = sum_late_frames(&s, 30.0).unwrap();
        assert!(out.voxels().iter().all(|&v| v == 100.0 + 1000.0));
    }

    #[test]
    fn early_frames_only_is_an_error() {
        let s = seq(&[5.0, 15.0, 25.0]);
        assert!(matches!(sum_late_frames(&s, 30.0), Err(Error::NoQualifyingFrames { .. })));
    }

    #[test]
    fn two_unit_frames_sum_to_two() {
        let s = FrameSequence::new(vec![constant(1.0), constant(1.0)], vec![30.0, 45.0], vec![45.0, 60.0]).unwrap();
        assert!(sum_late_frames(&s, 30.0).unwrap().voxels().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn slicing_round_trips() {
        let v = Volume::new([3, 2, 4], [1.0, 1.0, 2.0], Units::Suvr, (0..24).map(f64::from).collect()).unwrap();
        let slices = slice_axial(&v);
        assert_eq!(slices.len(), 4);
        assert_eq!(slices[1].pixels, vec![1.0, 5.0, 9.0, 13.0, 17.0, 21.0]);
        assert_eq!(stack_axial(&slices, v.spacing_mm(), Units::Suvr).unwrap(), v);
    }
}
