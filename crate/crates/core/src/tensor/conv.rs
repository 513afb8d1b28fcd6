//! im2col convolution kernels shared by `conv2d` and `conv_transpose2d`.
//!
//! Both ops are expressed through one geometry: the "conv side" maps a
//! `(cin, h, w)` image to a `(cout, ho, wo)` image. A transposed convolution
//! runs the same geometry backwards, so its input lives on the `(cout, ho, wo)`
//! side and its output on the `(cin, h, w)` side.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    /// Rows of the column matrix: one per (input channel, kernel tap).
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Row-major `c = a·b (+ c)`, with optional transposition of either operand.
/// `a` is logically `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the m×k, k×n and m×n extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `(cin, h, w)` image into a `patch_len × out_pixels` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let npix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) columns back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let npix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [n, cin, h, w]`, `kernel: [cout, cin, kh, kw]` → `[n, cout, ho, wo]`.
pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; n * g.out_len()];
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    for b in 0..n {
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        let dst = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(g.cout, g.patch_len(), g.out_pixels(), kernel, false, &cols, false, dst, false);
        add_bias(dst, bias, g.out_pixels());
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    n: usize,
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads {
    let mut dk = vec![0.0; g.cout * g.patch_len()];
    let mut db = vec![0.0; g.cout];
    let mut dx = need_input.then(|| vec![0.0; n * g.in_len()]);
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    for b in 0..n {
        let dout_b = &dout[b * g.out_len()..(b + 1) * g.out_len()];
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        gemm(g.cout, g.out_pixels(), g.patch_len(), dout_b, false, &cols, true, &mut dk, true);
        accumulate_bias_grad(&mut db, dout_b, g.out_pixels());
        if let Some(dx) = dx.as_mut() {
            gemm(g.patch_len(), g.cout, g.out_pixels(), kernel, true, dout_b, false, &mut cols, false);
            col2im(&cols, g, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
    ConvGrads { input: dx, kernel: dk, bias: db }
}

/// `y: [n, cout, ho, wo]` (conv-output side), `kernel: [cout, cin, kh, kw]`
/// → `[n, cin, h, w]`. The transposed-conv kernel layout `[Cin_t, Cout_t, kh, kw]`
/// is exactly the conv layout read from the other side.
pub(crate) fn conv_transpose2d_forward(
    y: &[f64],
    kernel: &[f64],
    bias: &[f64],
    n: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let mut out = vec![0.0; n * g.in_len()];
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    for b in 0..n {
        let y_b = &y[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(g.patch_len(), g.cout, g.out_pixels(), kernel, true, y_b, false, &mut cols, false);
        let dst = &mut out[b * g.in_len()..(b + 1) * g.in_len()];
        col2im(&cols, g, dst);
        add_bias(dst, bias, g.h * g.w);
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    y: &[f64],
    kernel: &[f64],
    dout: &[f64],
    n: usize,
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads {
    let mut dk = vec![0.0; g.cout * g.patch_len()];
    let mut db = vec![0.0; g.cin];
    let mut dy = need_input.then(|| vec![0.0; n * g.out_len()]);
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    for b in 0..n {
        let dout_b = &dout[b * g.in_len()..(b + 1) * g.in_len()];
        im2col(dout_b, g, &mut cols);
        let y_b = &y[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(g.cout, g.out_pixels(), g.patch_len(), y_b, false, &cols, true, &mut dk, true);
        accumulate_bias_grad(&mut db, dout_b, g.h * g.w);
        if let Some(dy) = dy.as_mut() {
            let dst = &mut dy[b * g.out_len()..(b + 1) * g.out_len()];
            gemm(g.cout, g.patch_len(), g.out_pixels(), kernel, false, &cols, false, dst, false);
        }
    }
    ConvGrads { input: dy, kernel: dk, bias: db }
}

fn add_bias(dst: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in dst.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad(db: &mut [f64], dout: &[f64], plane: usize) {
    for (acc, chunk) in db.iter_mut().zip(dout.chunks_exact(plane)) {
        *acc += chunk.iter().sum::<f64>();
    }
}
