#![allow(dead_code)]

use amyloid_synth::rng::{rng_from, Rng};
use amyloid_synth::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// Direct nested-loop cross-correlation. `x: [n,cin,h,w]`, `k: [cout,cin,kh,kw]`.
pub fn conv2d_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scatter-form transposed convolution. `y: [n,cin,h,w]`, `k: [cin,cout,kh,kw]`.
pub fn conv_transpose2d_oracle(y: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let (cout, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for v in &mut out[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo] {
                *v = b[co];
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let yv = y.data()[((bi * cin + ci) * h + iy) * w + ix];
                    for co in 0..cout {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                let kv = k.data()[((ci * cout + co) * kh + ki) * kw + kj];
                                out[((bi * cout + co) * ho + oy as usize) * wo + ox as usize] += yv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn seeded(seed: u64) -> Rng {
    rng_from(seed)
}

/// Relative error with a floor on the denominator so vanishing gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares tape gradients of a scalar function against central differences.
/// `build` records the function given leaf vars for `inputs`. Returns the
/// worst relative error over the checked coordinates (`max_coords` per input,
/// or all when `None`).
pub fn grad_check<F>(inputs: &[Tensor], build: F, max_coords: Option<usize>, rng: &mut Rng) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < t.len() => (0..m).map(|_| rng.random_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][c], numeric));
        }
    }
    worst
}

/// `sum(weights ⊙ x)`, a generic linear read-out that exercises every output.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone().reshaped(tape.value(x).shape()).unwrap());
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

/// SSIM by its direct definition: for every pixel centre in the mask, the
/// 11×11 Gaussian (σ 1.5) window clipped to the image and renormalised,
/// with means, variances and covariance summed explicitly. Pixels outside
/// the mask count as zero.
pub fn ssim_oracle(x: &[f64], y: &[f64], mask: &[bool], h: usize, w: usize, range: f64) -> f64 {
    let zx: Vec<f64> = x.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let zy: Vec<f64> = y.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let (mut total, mut count) = (0.0, 0.0);
    for ci in 0..h as isize {
        for cj in 0..w as isize {
            if !mask[ci as usize * w + cj as usize] {
                continue;
            }
            let mut cells = Vec::new();
            for di in -5..=5isize {
                for dj in -5..=5isize {
                    let (i, j) = (ci + di, cj + dj);
                    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                        continue;
                    }
                    let wt = (-((di * di + dj * dj) as f64) / (2.0 * 1.5 * 1.5)).exp();
                    cells.push((wt, i as usize * w + j as usize));
                }
            }
            let norm: f64 = cells.iter().map(|c| c.0).sum();
            let mx: f64 = cells.iter().map(|&(wt, k)| wt * zx[k]).sum::<f64>() / norm;
            let my: f64 = cells.iter().map(|&(wt, k)| wt * zy[k]).sum::<f64>() / norm;
            let vx: f64 = cells.iter().map(|&(wt, k)| wt * (zx[k] - mx).powi(2)).sum::<f64>() / norm;
            let vy: f64 = cells.iter().map(|&(wt, k)| wt * (zy[k] - my).powi(2)).sum::<f64>() / norm;
            let cxy: f64 = cells.iter().map(|&(wt, k)| wt * (zx[k] - mx) * (zy[k] - my)).sum::<f64>() / norm;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

/// `10·log10(range² / mean squared masked error)`.
pub fn psnr_oracle(x: &[f64], y: &[f64], mask: &[bool], range: f64) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).zip(mask).filter(|t| *t.1).map(|((a, b), _)| (a - b) * (a - b)).collect();
    let mse = d.iter().sum::<f64>() / d.len() as f64;
    10.0 * (range * range / mse).log10()
}

/// `1 − Σ(t−p)² / Σ(t−mean t)²` with every sum written out.
pub fn r2_oracle(pairs: &[(f64, f64)]) -> f64 {
    let mut mean = 0.0;
    for p in pairs {
        mean += p.0;
    }
    mean /= pairs.len() as f64;
    let (mut res, mut tot) = (0.0, 0.0);
    for p in pairs {
        res += (p.0 - p.1) * (p.0 - p.1);
        tot += (p.0 - mean) * (p.0 - mean);
    }
    1.0 - res / tot
}

/// A random masked image pair: blobs plus noise, the mask a random disc.
pub fn random_masked_pair(h: usize, w: usize, range: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let (cy, cx) = (rng.random_range(0.3..0.7) * h as f64, rng.random_range(0.3..0.7) * w as f64);
    let r = rng.random_range(0.25..0.5) * h.min(w) as f64;
    let mut x = Vec::with_capacity(h * w);
    let mut y = Vec::with_capacity(h * w);
    let mut m = Vec::with_capacity(h * w);
    let (fx, fy) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
    let noise = rng.random_range(0.0..0.3);
    for i in 0..h {
        for j in 0..w {
            let base = 0.5 * range * (1.0 + (fx * i as f64).sin() * (fy * j as f64).cos());
            x.push(base);
            y.push((base + noise * range * rng.random_range(-1.0..1.0)).clamp(0.0, range));
            m.push(((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt() < r);
        }
    }
    (x, y, m)
}

/// Paired slices from aligned phantom subjects, SUVR from the late frames,
/// masked to the true brain support. Keeps at most `max_pairs`.
pub fn phantom_slices(subjects: usize, dims: [usize; 3], seed: u64, max_pairs: usize) -> amyloid_synth::train::SliceDataset {
    use amyloid_synth::phantom::{generate_cohort, generate_subject, reference_region, PhantomConfig, StrataProportions};
    use amyloid_synth::preprocess::{normalize_suvr, sum_late_frames};
    use amyloid_synth::train::{SliceDataset, SlicePair};
    let cfg = PhantomConfig { dims, misalign: false, ..Default::default() };
    let cohort = generate_cohort(subjects, &StrataProportions::default(), seed, cfg.burden_max).unwrap();
    let reference = reference_region(dims);
    let mut out = SliceDataset { height: dims[0], width: dims[1], pairs: Vec::new() };
    for rec in &cohort {
        let s = generate_subject(rec, &cfg).unwrap();
        let pet = normalize_suvr(&sum_late_frames(&s.pet_frames, 30.0).unwrap(), &reference).unwrap();
        for z in 0..dims[2] {
            let mask = s.truth_mask.axial_plane(z);
            if mask.iter().all(|&m| m == 0.0) || out.pairs.len() == max_pairs {
                continue;
            }
            let keep = |v: Vec<f64>| v.iter().zip(&mask).map(|(a, m)| a * m).collect::<Vec<f64>>();
            out.pairs.push(SlicePair {
                subject_id: rec.id.clone(),
                z,
                mri: keep(s.mri.axial_plane(z)),
                pet: keep(pet.axial_plane(z)),
                mask: mask.clone(),
            });
        }
    }
    out
}

/// Entries bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn output_shape(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<usize> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let y = build(&mut t, &vars);
    t.value(y).shape().to_vec()
}

/// Gradient check of `op` read out through a random weighted sum.
fn check_op(inputs: &[Tensor], rng: &mut Rng, op: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let w = random_tensor(&output_shape(inputs, op), rng);
    grad_check(inputs, |t, v| { let y = op(t, v); weighted_sum(t, y, &w) }, None, rng)
}

/// Worst relative gradient error of every differentiable tape primitive on
/// random inputs drawn from `seed`.
pub fn primitive_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    use amyloid_synth::tensor::Activation;
    let mut rng = seeded(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
    let conv_in = [random_tensor(&[2, 2, 5, 6], rng), random_tensor(&[3, 2, 3, 3], rng), random_tensor(&[3], rng)];
    out.push(("conv2d", check_op(&conv_in, rng, &|t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap())));
    let deconv_in = [random_tensor(&[2, 3, 3, 4], rng), random_tensor(&[3, 2, 4, 4], rng), random_tensor(&[2], rng)];
    out.push(("conv_transpose2d", check_op(&deconv_in, rng, &|t, v| t.conv_transpose2d(v[0], v[1], v[2], stride, pad).unwrap())));
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        let x = [away_from_zero(&[2, 3, 4], rng)];
        out.push((name, check_op(&x, rng, &|t, v| t.activation(v[0], kind).unwrap())));
    }
    let x = [away_from_zero(&[3, 5], rng)];
    out.push(("abs", check_op(&x, rng, &|t, v| t.abs(v[0]))));
    out.push(("square", check_op(&x, rng, &|t, v| t.square(v[0]))));
    out.push(("affine", check_op(&x, rng, &|t, v| t.affine(v[0], -1.5, 0.25))));
    out.push(("scale", check_op(&x, rng, &|t, v| t.scale(v[0], 3.0))));
    let drop_seed: u64 = rng.random();
    out.push(("dropout", check_op(&x, rng, &|t, v| t.dropout(v[0], 0.4, true, drop_seed).unwrap())));
    out.push(("reshape", check_op(&x, rng, &|t, v| t.reshape(v[0], &[5, 3]).unwrap())));
    out.push(("sum", check_op(&x, rng, &|t, v| { let s = t.square(v[0]); t.sum(s) })));
    out.push(("mean", check_op(&x, rng, &|t, v| { let s = t.square(v[0]); t.mean(s) })));
    // ln on the interior of its clamp window
    let p = [Tensor::new(vec![8], (0..8).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()];
    out.push(("ln_clamped", check_op(&p, rng, &|t, v| t.ln_clamped(v[0], 1e-7, 1.0 - 1e-7))));
    let ab = [random_tensor(&[2, 2, 3, 3], rng), random_tensor(&[2, 2, 3, 3], rng)];
    out.push(("add", check_op(&ab, rng, &|t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("sub", check_op(&ab, rng, &|t, v| t.sub(v[0], v[1]).unwrap())));
    out.push(("mul", check_op(&ab, rng, &|t, v| t.mul(v[0], v[1]).unwrap())));
    let ac = [random_tensor(&[2, 2, 3, 3], rng), random_tensor(&[2, 1, 3, 3], rng)];
    out.push(("concat_channels", check_op(&ac, rng, &|t, v| t.concat_channels(v[0], v[1]).unwrap())));
    out
}

/// Worst relative error of the full generator objective (masked L1 plus an
/// adversarial term) against central differences over every weight of a
/// depth-2 generator on 8×8 inputs.
pub fn generator_objective_gradient_error(seed: u64) -> f64 {
    use amyloid_synth::model::{
        adversarial_losses, generator_forward, generator_objective, init_generator, masked_l1_loss, GeneratorConfig,
        LossWeights, Mode,
    };
    use amyloid_synth::tensor::ModelParams;
    let cfg = GeneratorConfig { depth: 2, base_filters: 2, dropout_rate: 0.5, ..Default::default() };
    let mut rng = seeded(seed);
    let mut params = init_generator(&cfg, &mut rng).unwrap();
    // zero biases put ReLU inputs exactly on the kink wherever a feature map
    // is empty; check at a generic point instead
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let mut rand_t = |lo: f64, hi: f64| Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| rng.random_range(lo..hi)).collect()).unwrap();
    let mri = rand_t(0.0, 1.0);
    let pet = rand_t(0.0, 3.0);
    let mask = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| if (i / 8) % 8 > 1 { 1.0 } else { 0.0 }).collect()).unwrap();
    let weights = LossWeights::default();
    let objective = |p: &ModelParams, grad: bool| {
        let mut t = Tape::new();
        let vars = p.record(&mut t, grad);
        let x = t.constant(mri.clone());
        let fake = generator_forward(&mut t, &cfg, &vars, x, Mode::Train { seed: 5 }).unwrap();
        let y = t.constant(pet.clone());
        let m = t.constant(mask.clone());
        let l1 = masked_l1_loss(&mut t, fake, y, m).unwrap();
        // a fixed linear read-out stands in for the discriminator
        let s = t.mean(fake);
        let d_fake = t.affine(s, 0.05, 0.3);
        let d_real = t.constant(Tensor::scalar(0.7));
        let (_, g_adv) = adversarial_losses(&mut t, d_real, d_fake);
        let obj = generator_objective(&mut t, g_adv, l1, &weights).unwrap();
        (t, vars, obj)
    };
    let (mut t, vars, obj) = objective(&params, true);
    t.backward(obj).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| t.grad(v).unwrap().to_vec()).collect();
    let value = |p: &ModelParams| {
        let (t, _, obj) = objective(p, false);
        t.value(obj).item().unwrap()
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        for (c, &gc) in g.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut().nth(k).unwrap().data_mut()[c] += h;
            let mut minus = params.clone();
            minus.tensors_mut().nth(k).unwrap().data_mut()[c] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(gc, numeric));
        }
    }
    worst
}
