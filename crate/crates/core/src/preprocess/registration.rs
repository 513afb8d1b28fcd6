//! Affine resampling and intensity-based registration.
//!
//! Coordinates are millimetres relative to the grid centre. A transform `T`
//! maps input-space points to output-space points (`q = A·p + t`); resampling
//! pulls every output voxel through `T⁻¹`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

const MIN_DET: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation_mm: [f64; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation_mm: [0.0; 3] }
    }

    pub fn new(matrix: [[f64; 3]; 3], translation_mm: [f64; 3]) -> Result<Self> {
        let t = Self { matrix, translation_mm };
        let det = t.determinant();
        if det.abs() <= MIN_DET || !det.is_finite() {
            return Err(Error::SingularTransform(det));
        }
        Ok(t)
    }

    pub fn translation(translation_mm: [f64; 3]) -> Self {
        Self { translation_mm, ..Self::identity() }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + self.translation_mm[i])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() <= MIN_DET || !det.is_finite() {
            return Err(Error::SingularTransform(det));
        }
        let m = &self.matrix;
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // cofactor of m[j][i]
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
            }
        }
        let t = self.translation_mm;
        let translation_mm =
            std::array::from_fn(|i| -(inv[i][0] * t[0] + inv[i][1] * t[1] + inv[i][2] * t[2]));
        Ok(Self { matrix: inv, translation_mm })
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &AffineTransform) -> Self {
        let (a, b) = (&self.matrix, &first.matrix);
        let matrix = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()));
        let translation_mm = self.apply(first.translation_mm);
        Self { matrix, translation_mm }
    }

    /// Largest absolute deviation of the linear part from identity.
    pub fn linear_deviation_from_identity(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.matrix[i][j] - id).abs());
            }
        }
        worst
    }
}

/// Warps `vol` by `t` onto an `out_dims` grid with the same spacing, using
/// trilinear interpolation. Out-of-field samples are zero.
pub fn resample(vol: &Volume, t: &AffineTransform, out_dims: [usize; 3]) -> Result<Volume> {
    resample_with(vol, t, out_dims, Interpolation::Trilinear)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

pub fn resample_with(vol: &Volume, t: &AffineTransform, out_dims: [usize; 3], interp: Interpolation) -> Result<Volume> {
    let pull = t.inverse()?;
    let out = Volume::zeros(out_dims, vol.spacing_mm(), vol.units());
    let voxels = pull_samples(vol, &out, &pull, interp);
    out.with_voxels(voxels)
}

fn pull_samples(vol: &Volume, grid: &Volume, pull: &AffineTransform, interp: Interpolation) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims();
    let mut voxels = Vec::with_capacity(grid.len());
    // Identity pulls on matching grids copy exactly.
    if *pull == AffineTransform::identity() && vol.dims() == grid.dims() {
        return vol.voxels().to_vec();
    }
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let q = grid.voxel_to_mm([x as f64, y as f64, z as f64]);
                let p = vol.mm_to_voxel(pull.apply(q));
                voxels.push(match interp {
                    Interpolation::Trilinear => vol.sample_trilinear(p),
                    Interpolation::Nearest => vol.sample_nearest(p),
                });
            }
        }
    }
    voxels
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    /// Largest parameter change (mm) tried by a line search.
    pub max_step_mm: f64,
    pub max_iters: usize,
    /// Stop after three consecutive iterations whose relative objective
    /// improvement is below this.
    pub rel_tolerance: f64,
    pub max_halvings: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { max_step_mm: 1.0, max_iters: 500, rel_tolerance: 1e-6, max_halvings: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: AffineTransform,
    /// False when a stage hit `max_iters` before meeting the tolerance; the
    /// transform is then the best found.
    pub converged: bool,
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Objective after every accepted iteration, both stages concatenated.
    pub objective_trace: Vec<f64>,
}

/// Aligns `moving` to `fixed` by minimising the mean squared intensity error
/// of `resample(moving, T)` against `fixed`: first over translation only,
/// then over all twelve affine parameters. Returns the composite `T`.
pub fn register_affine(
    moving: &Volume,
    fixed: &Volume,
    init: &AffineTransform,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if moving.spacing_mm() != fixed.spacing_mm() {
        return Err(Error::ShapeMismatch(format!(
            "spacing {:?} vs {:?}",
            moving.spacing_mm(),
            fixed.spacing_mm()
        )));
    }
    let pull0 = init.inverse()?;
    let problem = Problem::new(moving, fixed);
    // Linear-part entries are scaled by the half-extent along their column so
    // every parameter is a displacement in mm.
    let radius: [f64; 3] = std::array::from_fn(|a| 0.5 * fixed.dims()[a] as f64 * fixed.spacing_mm()[a]);
    let to_params = |pull: &AffineTransform| -> [f64; 12] {
        let mut p = [0.0; 12];
        p[..3].copy_from_slice(&pull.translation_mm);
        for i in 0..3 {
            for j in 0..3 {
                p[3 + 3 * i + j] = pull.matrix[i][j] * radius[j];
            }
        }
        p
    };
    let from_params = |p: &[f64; 12]| -> AffineTransform {
        let matrix = std::array::from_fn(|i| std::array::from_fn(|j| p[3 + 3 * i + j] / radius[j]));
        AffineTransform { matrix, translation_mm: [p[0], p[1], p[2]] }
    };

    let initial = to_params(&pull0);
    let initial_objective = problem.objective(&pull0);
    if initial_objective == 0.0 {
        return Ok(RegistrationResult {
            transform: *init,
            converged: true,
            iterations: 0,
            initial_objective,
            final_objective: 0.0,
            objective_trace: vec![],
        });
    }
    if problem.overlap(&pull0) == 0 {
        return Err(Error::EmptyMask);
    }

    let mut trace = Vec::new();
    let eval = |p: &[f64; 12]| problem.objective(&from_params(p));
    let grad = |p: &[f64; 12]| {
        let g = problem.gradient(&from_params(p));
        let mut out = [0.0; 12];
        out[..3].copy_from_slice(&g[0]);
        for i in 0..3 {
            for j in 0..3 {
                out[3 + 3 * i + j] = g[1 + i][j] / radius[j];
            }
        }
        out
    };
    let stage1 = descend(&initial, 3, eval, grad, config, &mut trace);
    let stage2 = descend(&stage1.params, 12, eval, grad, config, &mut trace);

    let pull = from_params(&stage2.params);
    let transform = pull.inverse()?;
    Ok(RegistrationResult {
        transform,
        converged: stage1.converged && stage2.converged,
        iterations: stage1.iterations + stage2.iterations,
        initial_objective,
        final_objective: stage2.value,
        objective_trace: trace,
    })
}

struct Problem<'a> {
    moving: &'a Volume,
    fixed: &'a Volume,
}

impl<'a> Problem<'a> {
    fn new(moving: &'a Volume, fixed: &'a Volume) -> Self {
        Self { moving, fixed }
    }

    /// Mean squared error over the fixed voxels that pull from inside the
    /// moving field of view.
    fn objective(&self, pull: &AffineTransform) -> f64 {
        let (m, c) = voxel_pull(pull, self.fixed, self.moving);
        let [nx, ny, nz] = self.fixed.dims();
        let hi = self.moving.dims().map(|d| d as f64 - 1.0);
        let fixed = self.fixed.voxels();
        let (mut sse, mut count) = (0.0, 0usize);
        let mut i = 0;
        for x in 0..nx {
            for y in 0..ny {
                let mut p: [f64; 3] =
                    std::array::from_fn(|a| m[a][0] * x as f64 + m[a][1] * y as f64 + c[a]);
                for _ in 0..nz {
                    if (0..3).all(|a| p[a] >= 0.0 && p[a] <= hi[a]) {
                        let d = self.moving.sample_trilinear(p) - fixed[i];
                        sse += d * d;
                        count += 1;
                    }
                    i += 1;
                    for a in 0..3 {
                        p[a] += m[a][2];
                    }
                }
            }
        }
        if count == 0 {
            f64::INFINITY
        } else {
            sse / count as f64
        }
    }

    /// Gradient of [`Self::objective`] with respect to the pull map: row 0
    /// holds `d/dt_i`, rows 1..4 hold `d/dA_ij`. Voxels entering or leaving the
    /// overlap are ignored, as are trilinear kinks.
    fn gradient(&self, pull: &AffineTransform) -> [[f64; 3]; 4] {
        let (m, c) = voxel_pull(pull, self.fixed, self.moving);
        let [nx, ny, nz] = self.fixed.dims();
        let fs = self.fixed.spacing_mm();
        let ms = self.moving.spacing_mm();
        let fc: [f64; 3] = std::array::from_fn(|a| ([nx, ny, nz][a] as f64 - 1.0) / 2.0);
        let hi = self.moving.dims().map(|d| d as f64 - 1.0);
        let fixed = self.fixed.voxels();
        let mut acc = [[0.0; 3]; 4];
        let mut count = 0usize;
        let mut i = 0;
        for x in 0..nx {
            for y in 0..ny {
                let mut p: [f64; 3] =
                    std::array::from_fn(|a| m[a][0] * x as f64 + m[a][1] * y as f64 + c[a]);
                let (xm, ym) = ((x as f64 - fc[0]) * fs[0], (y as f64 - fc[1]) * fs[1]);
                for z in 0..nz {
                    if (0..3).all(|a| p[a] >= 0.0 && p[a] <= hi[a]) {
                        let (v, g) = self.moving.sample_trilinear_grad(p);
                        let d = v - fixed[i];
                        let pos = [xm, ym, (z as f64 - fc[2]) * fs[2]];
                        for a in 0..3 {
                            let w = d * g[a] / ms[a];
                            acc[0][a] += w;
                            for j in 0..3 {
                                acc[1 + a][j] += w * pos[j];
                            }
                        }
                        count += 1;
                    }
                    i += 1;
                    for a in 0..3 {
                        p[a] += m[a][2];
                    }
                }
            }
        }
        let k = if count == 0 { 0.0 } else { 2.0 / count as f64 };
        acc.map(|r| r.map(|v| v * k))
    }

    /// Number of fixed voxels that pull from inside the moving field of view.
    fn overlap(&self, pull: &AffineTransform) -> usize {
        let [nx, ny, nz] = self.fixed.dims();
        let md = self.moving.dims();
        let mut n = 0;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let p = self.moving.mm_to_voxel(pull.apply(self.fixed.voxel_to_mm([x as f64, y as f64, z as f64])));
                    if (0..3).all(|a| p[a] > -1.0 && p[a] < md[a] as f64) {
                        n += 1;
                    }
                }
            }
        }
        n
    }
}

/// The pull map expressed between voxel indices: `p_vox = m·q_vox + c`.
fn voxel_pull(pull: &AffineTransform, fixed: &Volume, moving: &Volume) -> ([[f64; 3]; 3], [f64; 3]) {
    let (fs, ms) = (fixed.spacing_mm(), moving.spacing_mm());
    let fc: [f64; 3] = std::array::from_fn(|a| (fixed.dims()[a] as f64 - 1.0) / 2.0);
    let mc: [f64; 3] = std::array::from_fn(|a| (moving.dims()[a] as f64 - 1.0) / 2.0);
    let m: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| pull.matrix[i][j] * fs[j] / ms[i]));
    let c = std::array::from_fn(|i| {
        let shift: f64 = (0..3).map(|j| m[i][j] * fc[j]).sum();
        (pull.translation_mm[i] / ms[i]) + mc[i] - shift
    });
    (m, c)
}

struct Descent {
    params: [f64; 12],
    value: f64,
    converged: bool,
    iterations: usize,
}

/// BFGS on the first `active` parameters with an Armijo halving line search.
/// The first trial step moves no parameter more than `max_step_mm`.
fn descend(
    start: &[f64; 12],
    active: usize,
    eval: impl Fn(&[f64; 12]) -> f64,
    gradient: impl Fn(&[f64; 12]) -> [f64; 12],
    config: &RegistrationConfig,
    trace: &mut Vec<f64>,
) -> Descent {
    let n = active;
    let mut params = *start;
    let mut value = eval(&params);
    let mut grad = gradient(&params);
    // Inverse Hessian estimate; `None` means a scaled identity, rebuilt on demand.
    let mut inv_h: Option<Vec<Vec<f64>>> = None;
    let mut quiet = 0;
    for iter in 0..config.max_iters {
        let gmax = grad[..n].iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 || !gmax.is_finite() {
            return Descent { params, value, converged: true, iterations: iter };
        }
        let h = inv_h.get_or_insert_with(|| {
            let gamma = config.max_step_mm / gmax;
            (0..n).map(|i| (0..n).map(|j| if i == j { gamma } else { 0.0 }).collect()).collect()
        });
        let mut dir: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i][j] * grad[j]).sum::<f64>()).collect();
        let mut slope: f64 = (0..n).map(|i| dir[i] * grad[i]).sum();
        if !(slope < 0.0) {
            inv_h = None;
            continue;
        }
        let dmax = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if dmax > config.max_step_mm {
            let k = config.max_step_mm / dmax;
            dir.iter_mut().for_each(|d| *d *= k);
            slope *= k;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let mut cand = params;
            for i in 0..n {
                cand[i] += alpha * dir[i];
            }
            let v = eval(&cand);
            if v <= value + 1e-4 * alpha * slope && v < value {
                accepted = Some((cand, v));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            if inv_h.take().is_some() && iter > 0 {
                // Retry once from a fresh curvature estimate.
                continue;
            }
            return Descent { params, value, converged: true, iterations: iter };
        };
        let new_grad = gradient(&cand);
        let s: Vec<f64> = (0..n).map(|i| cand[i] - params[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| new_grad[i] - grad[i]).collect();
        let sy: f64 = (0..n).map(|i| s[i] * y[i]).sum();
        if sy > 1e-12 * (0..n).map(|i| s[i] * s[i]).sum::<f64>().sqrt() * (0..n).map(|i| y[i] * y[i]).sum::<f64>().sqrt() {
            let h = inv_h.as_mut().expect("set above");
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
            let yhy: f64 = (0..n).map(|i| y[i] * hy[i]).sum();
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += (1.0 + yhy * rho) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let improvement = (value - v) / value;
        params = cand;
        value = v;
        grad = new_grad;
        trace.push(value);
        quiet = if improvement < config.rel_tolerance { quiet + 1 } else { 0 };
        if quiet >= 3 {
            return Descent { params, value, converged: true, iterations: iter + 1 };
        }
    }
    Descent { params, value, converged: false, iterations: config.max_iters }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Units;

    fn delta(dims: [usize; 3], at: [usize; 3]) -> Volume {
        let mut v = vec![0.0; dims.iter().product()];
        v[(at[0] * dims[1] + at[1]) * dims[2] + at[2]] = 1.0;
        Volume::new(dims, [2.0; 3], Units::Arbitrary, v).unwrap()
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn analytic_gradient_matches_differences() {
        let dims = [12, 10, 8];
        let smooth = |shift: f64| {
            let mut v = Vec::new();
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    for z in 0..dims[2] {
                        let r2 = (x as f64 - 5.5 - shift).powi(2) + (y as f64 - 4.5).powi(2) * 1.3 + (z as f64 - 3.5).powi(2);
                        v.push((-r2 / 8.0).exp());
                    }
                }
            }
            Volume::new(dims, [2.0, 2.0, 3.0], Units::Arbitrary, v).unwrap()
        };
        let (moving, fixed) = (smooth(0.7), smooth(0.0));
        let problem = Problem::new(&moving, &fixed);
        let pull = AffineTransform { matrix: [[1.03, 0.02, -0.01], [0.01, 0.98, 0.03], [-0.02, 0.0, 1.01]], translation_mm: [0.3, -0.2, 0.1] };
        let g = problem.gradient(&pull);
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..3 {
                let (mut plus, mut minus) = (pull, pull);
                if r == 0 {
                    plus.translation_mm[c] += h;
                    minus.translation_mm[c] -= h;
                } else {
                    plus.matrix[r - 1][c] += h;
                    minus.matrix[r - 1][c] -= h;
                }
                let fd = (problem.objective(&plus) - problem.objective(&minus)) / (2.0 * h);
                assert!((fd - g[r][c]).abs() <= 1e-5 * (1.0 + fd.abs()), "{r},{c}: {fd} vs {}", g[r][c]);
            }
        }
    }

    #[test]
    fn inverse_and_compose() {
        let t = AffineTransform::new([[1.1, 0.05, 0.0], [0.02, 0.95, 0.03], [0.0, -0.04, 1.02]], [1.0, -2.0, 0.5])
            .unwrap();
        let id = t.compose(&t.inverse().unwrap());
        assert!(id.linear_deviation_from_identity() < 1e-12);
        assert!(id.translation_mm.iter().all(|v| v.abs() < 1e-12));
        let p = [3.0, -1.0, 2.0];
        let back = t.inverse().unwrap().apply(t.apply(p));
        assert!((0..3).all(|i| (back[i] - p[i]).abs() < 1e-12));
    }

    #[test]
    fn singular_transform_rejected() {
        let m = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(AffineTransform::new(m, [0.0; 3]), Err(Error::SingularTransform(_))));
        let t = AffineTransform { matrix: m, translation_mm: [0.0; 3] };
        let v = delta([4, 4, 4], [1, 1, 1]);
        assert!(matches!(resample(&v, &t, [4, 4, 4]), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn identity_resample_is_bit_identical() {
        let v = Volume::new([3, 4, 5], [2.0; 3], Units::Arbitrary, (0..60).map(|i| (i as f64).sin()).collect())
            .unwrap();
        let r = resample(&v, &AffineTransform::identity(), [3, 4, 5]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn integer_and_half_voxel_shifts_of_a_delta() {
        let v = delta([6, 6, 6], [2, 3, 3]);
        let r = resample(&v, &AffineTransform::translation([2.0, 0.0, 0.0]), [6, 6, 6]).unwrap();
        assert_eq!(r.get(3, 3, 3), 1.0);
        assert_eq!(r.voxels().iter().sum::<f64>(), 1.0);

        let r = resample(&v, &AffineTransform::translation([1.0, 0.0, 0.0]), [6, 6, 6]).unwrap();
        assert_eq!(r.get(2, 3, 3), 0.5);
        assert_eq!(r.get(3, 3, 3), 0.5);
        assert_eq!(r.voxels().iter().sum::<f64>(), 1.0);
    }
}
