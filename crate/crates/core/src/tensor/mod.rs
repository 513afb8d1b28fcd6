//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and fills the
//! `grad` slot of every tensor that requires a gradient. A tape supports a
//! single backward pass; build a fresh tape for each step.

mod adam;
pub(crate) mod conv;

pub use adam::{adam_step, AdamConfig, AdamState};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};
use conv::ConvGeom;

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Zero-mean Gaussian entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Activation { input: Var, kind: Activation },
    Dropout { input: Var, scale: Vec<f64> },
    ConcatChannels { a: Var, b: Var },
    Reshape { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { input: Var, scale: f64 },
    Abs { input: Var },
    Square { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    LnClamped { input: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor { shape, data, requires_grad, grad: None };
        self.push(value, op)
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn conv_geom(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<(usize, ConvGeom)> {
        if stride < 1 {
            return Err(Error::InvalidHyperparam(format!("stride must be >= 1, got {stride}")));
        }
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "convolution wants 4-d input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k0, k1, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if c != k0 && transposed || c != k1 && !transposed {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels but kernel is {ks:?}"
            )));
        }
        let out_channels = if transposed { k1 } else { k0 };
        if bs != [out_channels] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {bs:?} does not match {out_channels} output channels"
            )));
        }
        let geom = if transposed {
            let ho = (h - 1) * stride + kh;
            let wo = (w - 1) * stride + kw;
            if ho <= 2 * padding || wo <= 2 * padding {
                return Err(Error::InvalidHyperparam(format!(
                    "padding {padding} leaves no output for {h}x{w} input"
                )));
            }
            let (oh, ow) = (ho - 2 * padding, wo - 2 * padding);
            ConvGeom { cin: k1, h: oh, w: ow, cout: k0, kh, kw, stride, padding, ho: h, wo: w }
        } else {
            if h + 2 * padding < kh || w + 2 * padding < kw {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"
                )));
            }
            let ho = (h + 2 * padding - kh) / stride + 1;
            let wo = (w + 2 * padding - kw) / stride + 1;
            ConvGeom { cin: c, h, w, cout: k0, kh, kw, stride, padding, ho, wo }
        };
        Ok((n, geom))
    }

    /// 2-D cross-correlation. `input: [N, Cin, H, W]`, `kernel: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, geom) = self.conv_geom(input, kernel, bias, stride, padding, false)?;
        let out = conv::conv2d_forward(self.data(input), self.data(kernel), self.data(bias), n, &geom);
        let shape = vec![n, geom.cout, geom.ho, geom.wo];
        Ok(self.push_derived(shape, out, &[input, kernel, bias], Op::Conv2d { input, kernel, bias, geom }))
    }

    /// Adjoint of [`Tape::conv2d`]. `input: [N, Cin, H, W]`, `kernel: [Cin, Cout, kh, kw]`,
    /// output side `(H - 1)·stride - 2·padding + kh`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, geom) = self.conv_geom(input, kernel, bias, stride, padding, true)?;
        let out = conv::conv_transpose2d_forward(self.data(input), self.data(kernel), self.data(bias), n, &geom);
        let shape = vec![n, geom.cin, geom.h, geom.w];
        Ok(self.push_derived(shape, out, &[input, kernel, bias], Op::ConvTranspose2d { input, kernel, bias, geom }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(slope) = kind {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::InvalidHyperparam(format!("leaky slope {slope} outside (0, 1)")));
            }
        }
        let out = self.data(input).iter().map(|&x| kind.apply(x)).collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push_derived(shape, out, &[input], Op::Activation { input, kind }))
    }

    /// Inverted dropout: survivors are scaled by `1/(1 - rate)`. Identity when
    /// `training` is false or `rate` is zero.
    pub fn dropout(&mut self, input: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidHyperparam(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.data(input).len();
        let scale = if training && rate > 0.0 {
            let mut rng = rng_from(seed);
            let keep = 1.0 / (1.0 - rate);
            (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
        } else {
            vec![1.0; n]
        };
        let out = self.data(input).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push_derived(shape, out, &[input], Op::Dropout { input, scale }))
    }

    /// Stacks two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("cannot concatenate {sa:?} with {sb:?}")));
        }
        let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let shape = vec![n, ca + cb, sa[2], sa[3]];
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&self.data(a)[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&self.data(b)[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(self.push_derived(shape, out, &[a, b], Op::ConcatChannels { a, b }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(input).len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(input)
            )));
        }
        let out = self.data(input).to_vec();
        Ok(self.push_derived(shape.to_vec(), out, &[input], Op::Reshape { input }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, out, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `scale·x + offset`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, offset: f64) -> Var {
        let out = self.data(input).iter().map(|&x| scale * x + offset).collect();
        let shape = self.shape(input).to_vec();
        self.push_derived(shape, out, &[input], Op::Affine { input, scale })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.affine(input, factor, 0.0)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let out = self.data(input).iter().map(|x| x.abs()).collect();
        let shape = self.shape(input).to_vec();
        self.push_derived(shape, out, &[input], Op::Abs { input })
    }

    pub fn square(&mut self, input: Var) -> Var {
        let out = self.data(input).iter().map(|x| x * x).collect();
        let shape = self.shape(input).to_vec();
        self.push_derived(shape, out, &[input], Op::Square { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().sum();
        self.push_derived(vec![1], vec![s], &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let d = self.data(input);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push_derived(vec![1], vec![m], &[input], Op::Mean { input })
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where clamping is active.
    pub fn ln_clamped(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let out = self.data(input).iter().map(|x| x.clamp(lo, hi).ln()).collect();
        let shape = self.shape(input).to_vec();
        self.push_derived(shape, out, &[input], Op::LnClamped { input, lo, hi })
    }

    /// Reverse-mode sweep from a scalar. Fills `grad` on every recorded tensor
    /// that requires one. A second call on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].value.shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].value.requires_grad;
            let mut contributions: Vec<(Var, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, geom } => {
                    let n = self.nodes[input.0].value.shape[0];
                    let cg = conv::conv2d_backward(
                        self.data(*input),
                        self.data(*kernel),
                        &g,
                        n,
                        geom,
                        needs(*input),
                    );
                    if let Some(dx) = cg.input {
                        contributions.push((*input, dx));
                    }
                    contributions.push((*kernel, cg.kernel));
                    contributions.push((*bias, cg.bias));
                }
                Op::ConvTranspose2d { input, kernel, bias, geom } => {
                    let n = self.nodes[input.0].value.shape[0];
                    let cg = conv::conv_transpose2d_backward(
                        self.data(*input),
                        self.data(*kernel),
                        &g,
                        n,
                        geom,
                        needs(*input),
                    );
                    if let Some(dy) = cg.input {
                        contributions.push((*input, dy));
                    }
                    contributions.push((*kernel, cg.kernel));
                    contributions.push((*bias, cg.bias));
                }
                Op::Activation { input, kind } => {
                    let x = self.data(*input);
                    let y = &node.value.data;
                    let dx = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                        .collect();
                    contributions.push((*input, dx));
                }
                Op::Dropout { input, scale } => {
                    contributions.push((*input, g.iter().zip(scale).map(|(a, b)| a * b).collect()));
                }
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (n, plane) = (sa[0], sa[2] * sa[3]);
                    let (la, lb) = (sa[1] * plane, sb[1] * plane);
                    let mut ga = Vec::with_capacity(n * la);
                    let mut gb = Vec::with_capacity(n * lb);
                    for i in 0..n {
                        let base = i * (la + lb);
                        ga.extend_from_slice(&g[base..base + la]);
                        gb.extend_from_slice(&g[base + la..base + la + lb]);
                    }
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::Reshape { input } => contributions.push((*input, g.clone())),
                Op::Add { a, b } => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.clone()));
                }
                Op::Sub { a, b } => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.iter().map(|v| -v).collect()));
                }
                Op::Mul { a, b } => {
                    let (da, db) = (self.data(*a), self.data(*b));
                    contributions.push((*a, g.iter().zip(db).map(|(x, y)| x * y).collect()));
                    contributions.push((*b, g.iter().zip(da).map(|(x, y)| x * y).collect()));
                }
                Op::Affine { input, scale } => {
                    contributions.push((*input, g.iter().map(|v| v * scale).collect()));
                }
                Op::Abs { input } => {
                    let x = self.data(*input);
                    let dx = g.iter().zip(x).map(|(gi, &xi)| gi * sign(xi)).collect();
                    contributions.push((*input, dx));
                }
                Op::Square { input } => {
                    let x = self.data(*input);
                    contributions.push((*input, g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect()));
                }
                Op::Sum { input } => {
                    contributions.push((*input, vec![g[0]; self.data(*input).len()]));
                }
                Op::Mean { input } => {
                    let n = self.data(*input).len();
                    contributions.push((*input, vec![g[0] / n as f64; n]));
                }
                Op::LnClamped { input, lo, hi } => {
                    let x = self.data(*input);
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > *lo && xi < *hi { gi / xi } else { 0.0 })
                        .collect();
                    contributions.push((*input, dx));
                }
            }
            for (v, c) in contributions {
                if !needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            self.nodes[idx].value.grad = Some(g);
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(requires_grad)))
            .collect()
    }
}
