//! Encoder-decoder generator, conditioned discriminator and the losses that
//! drive them. Neither network has a normalization layer: SUVR scale has to
//! survive from input statistics to output.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Activation, ModelParams, Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, OptimizerState};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PADDING: usize = 1;
const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub use_skips: bool,
    pub dropout_rate: f64,
    pub final_activation: FinalActivation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_filters: 8,
            depth: 4,
            use_skips: true,
            dropout_rate: 0.5,
            final_activation: FinalActivation::Relu,
        }
    }
}

/// Channel count of encoder level `i`.
fn level_channels(base: usize, i: usize) -> usize {
    (base << i.min(3)).min(8 * base)
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidHyperparam(format!("generator depth {} < 2", self.depth)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_filters == 0 {
            return Err(Error::InvalidHyperparam("generator channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidHyperparam(format!("dropout rate {}", self.dropout_rate)));
        }
        Ok(())
    }

    /// Input side lengths must be divisible by `2^depth`.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let unit = 1usize << self.depth;
        if shape.len() != 4 || shape[1] != self.in_channels || !shape[2].is_multiple_of(unit) || !shape[3].is_multiple_of(unit) {
            return Err(Error::ShapeMismatch(format!(
                "generator input {shape:?}: need [N, {}, H, W] with H, W divisible by {unit}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Decoder levels that apply dropout: the two innermost, never the output block.
    fn decoder_has_dropout(&self, level: usize) -> bool {
        level > 0 && level + 2 >= self.depth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// MRI channels plus PET channels.
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    /// Height and width of the slices it will judge; sizes the linear head.
    pub image_size: [usize; 2],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { in_channels: 2, base_filters: 8, depth: 4, image_size: [64, 64] }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.in_channels == 0 || self.base_filters == 0 {
            return Err(Error::InvalidHyperparam("discriminator sizes must be positive".into()));
        }
        let unit = 1usize << self.depth;
        if self.image_size.iter().any(|&s| s == 0 || s % unit != 0) {
            return Err(Error::InvalidHyperparam(format!(
                "image size {:?} not divisible by {unit}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn head_size(&self) -> [usize; 2] {
        self.image_size.map(|s| s >> self.depth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_masked_l1: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_masked_l1: 100.0, lambda_adv: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_masked_l1 > 0.0 && self.lambda_adv > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidHyperparam(format!("loss weights must be positive: {self:?}")))
        }
    }
}

fn gaussian(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng)
}

/// Fresh generator weights: N(0, 0.02) kernels, zero biases.
pub fn init_generator(config: &GeneratorConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let mut p = ModelParams::new();
    let base = config.base_filters;
    for i in 0..config.depth {
        let cin = if i == 0 { config.in_channels } else { level_channels(base, i - 1) };
        let cout = level_channels(base, i);
        p.push(format!("enc{i}.conv.weight"), gaussian(&[cout, cin, KERNEL, KERNEL], rng));
        p.push(format!("enc{i}.conv.bias"), Tensor::zeros(&[cout]));
    }
    for i in (0..config.depth).rev() {
        let cin = decoder_in_channels(config, i);
        let cout = if i == 0 { config.out_channels } else { level_channels(base, i - 1) };
        p.push(format!("dec{i}.deconv.weight"), gaussian(&[cin, cout, KERNEL, KERNEL], rng));
        p.push(format!("dec{i}.deconv.bias"), Tensor::zeros(&[cout]));
    }
    Ok(p)
}

fn decoder_in_channels(config: &GeneratorConfig, level: usize) -> usize {
    let base = config.base_filters;
    if level + 1 == config.depth {
        level_channels(base, level)
    } else {
        let from_below = level_channels(base, level);
        if config.use_skips {
            from_below + level_channels(base, level)
        } else {
            from_below
        }
    }
}

/// Whether a forward pass samples dropout masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; masks derive from `seed` and the layer index.
    Train { seed: u64 },
    Eval,
}

/// Records the generator on `tape`. `weights` are the recorded parameter
/// handles in [`init_generator`] order.
pub fn generator_forward(tape: &mut Tape, config: &GeneratorConfig, weights: &[Var], input: Var, mode: Mode) -> Result<Var> {
    config.validate()?;
    config.check_input(tape.value(input).shape())?;
    if weights.len() != 4 * config.depth {
        return Err(Error::ShapeMismatch(format!(
            "generator expects {} tensors, got {}",
            4 * config.depth,
            weights.len()
        )));
    }
    let mut skips = Vec::with_capacity(config.depth);
    let mut x = input;
    for i in 0..config.depth {
        let y = tape.conv2d(x, weights[2 * i], weights[2 * i + 1], STRIDE, PADDING)?;
        x = tape.activation(y, Activation::LeakyRelu(LEAKY_SLOPE))?;
        skips.push(x);
    }
    let dec_base = 2 * config.depth;
    for (k, level) in (0..config.depth).rev().enumerate() {
        if level + 1 < config.depth && config.use_skips {
            x = tape.concat_channels(x, skips[level])?;
        }
        let y = tape.conv_transpose2d(x, weights[dec_base + 2 * k], weights[dec_base + 2 * k + 1], STRIDE, PADDING)?;
        x = match config.final_activation {
            FinalActivation::Relu => tape.activation(y, Activation::Relu)?,
        };
        if config.decoder_has_dropout(level) {
            if let Mode::Train { seed } = mode {
                x = tape.dropout(x, config.dropout_rate, true, derive_seed(&[seed, level as u64]))?;
            }
        }
    }
    Ok(x)
}

/// Inference convenience: runs the generator without dropout on a fresh tape.
pub fn generate(config: &GeneratorConfig, params: &ModelParams, mri: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let weights = params.record(&mut tape, false);
    let input = tape.constant(mri.clone());
    let out = generator_forward(&mut tape, config, &weights, input, Mode::Eval)?;
    Ok(tape.value(out).clone())
}

pub fn init_discriminator(config: &DiscriminatorConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let mut p = ModelParams::new();
    let base = config.base_filters;
    for i in 0..config.depth {
        let cin = if i == 0 { config.in_channels } else { level_channels(base, i - 1) };
        let cout = level_channels(base, i);
        p.push(format!("block{i}.conv.weight"), gaussian(&[cout, cin, KERNEL, KERNEL], rng));
        p.push(format!("block{i}.conv.bias"), Tensor::zeros(&[cout]));
    }
    let [hh, hw] = config.head_size();
    let c = level_channels(base, config.depth - 1);
    p.push("head.conv.weight", gaussian(&[1, c, hh, hw], rng));
    p.push("head.conv.bias", Tensor::zeros(&[1]));
    Ok(p)
}

/// Records the discriminator on `tape`: MRI and PET are stacked on the
/// channel axis; the output is one probability per item, shape `[N, 1]`.
pub fn discriminator_forward(tape: &mut Tape, config: &DiscriminatorConfig, weights: &[Var], mri: Var, pet: Var) -> Result<Var> {
    config.validate()?;
    let (ms, ps) = (tape.value(mri).shape().to_vec(), tape.value(pet).shape().to_vec());
    if ms.len() != 4 || ps.len() != 4 || ms[0] != ps[0] || ms[2..] != ps[2..] {
        return Err(Error::ShapeMismatch(format!("discriminator inputs {ms:?} and {ps:?}")));
    }
    if ms[1] + ps[1] != config.in_channels || ms[2..] != config.image_size {
        return Err(Error::ShapeMismatch(format!(
            "discriminator built for {} channels of {:?}, got {ms:?} + {ps:?}",
            config.in_channels, config.image_size
        )));
    }
    if weights.len() != 2 * config.depth + 2 {
        return Err(Error::ShapeMismatch(format!(
            "discriminator expects {} tensors, got {}",
            2 * config.depth + 2,
            weights.len()
        )));
    }
    let mut x = tape.concat_channels(mri, pet)?;
    for i in 0..config.depth {
        let y = tape.conv2d(x, weights[2 * i], weights[2 * i + 1], STRIDE, PADDING)?;
        x = tape.activation(y, Activation::LeakyRelu(LEAKY_SLOPE))?;
    }
    let logit = tape.conv2d(x, weights[2 * config.depth], weights[2 * config.depth + 1], 1, 0)?;
    let logit = tape.reshape(logit, &[ms[0], 1])?;
    tape.activation(logit, Activation::Sigmoid)
}

/// `sum(|pred − target|·mask) / sum(mask)`.
pub fn masked_l1_loss(tape: &mut Tape, pred: Var, target: Var, mask: Var) -> Result<Var> {
    let shapes = [tape.value(pred).shape(), tape.value(target).shape(), tape.value(mask).shape()];
    if shapes[0] != shapes[1] || shapes[0] != shapes[2] {
        return Err(Error::ShapeMismatch(format!(
            "masked L1 on {:?}, {:?}, {:?}",
            shapes[0], shapes[1], shapes[2]
        )));
    }
    let weight: f64 = tape.value(mask).data().iter().sum();
    if !(weight > 0.0) {
        return Err(Error::EmptyMask);
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let masked = tape.mul(abs, mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / weight))
}

/// Binary cross-entropy pair: `(d_loss, g_adv_loss)` with clamped logs.
pub fn adversarial_losses(tape: &mut Tape, d_real: Var, d_fake: Var) -> (Var, Var) {
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_real = tape.ln_clamped(d_real, lo, hi);
    let real_term = tape.mean(log_real);
    let not_fake = tape.affine(d_fake, -1.0, 1.0);
    let log_not_fake = tape.ln_clamped(not_fake, lo, hi);
    let fake_term = tape.mean(log_not_fake);
    let sum = tape.add(real_term, fake_term).expect("scalars");
    let d_loss = tape.scale(sum, -1.0);
    let log_fake = tape.ln_clamped(d_fake, lo, hi);
    let g_term = tape.mean(log_fake);
    let g_adv = tape.scale(g_term, -1.0);
    (d_loss, g_adv)
}

/// `lambda_adv·g_adv + lambda_masked_l1·masked_l1`.
pub fn generator_objective(tape: &mut Tape, g_adv: Var, masked_l1: Var, weights: &LossWeights) -> Result<Var> {
    for v in [g_adv, masked_l1] {
        if tape.value(v).len() != 1 {
            return Err(Error::NotScalar(tape.value(v).shape().to_vec()));
        }
    }
    let a = tape.scale(g_adv, weights.lambda_adv);
    let l = tape.scale(masked_l1, weights.lambda_masked_l1);
    tape.add(a, l)
}

/// Result of checking that a parameter set holds only convolution weights and
/// biases.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamAudit {
    pub conv_weights: usize,
    pub conv_biases: usize,
    /// Anything else, by name. Normalization scales, shifts or running
    /// statistics would land here.
    pub other: Vec<String>,
}

impl ParamAudit {
    pub fn only_convolutions(&self) -> bool {
        self.other.is_empty() && self.conv_weights > 0 && self.conv_weights == self.conv_biases
    }
}

pub fn audit_params(params: &ModelParams) -> ParamAudit {
    let mut audit = ParamAudit::default();
    for (name, t) in params.iter() {
        let conv_layer = name.contains(".conv.") || name.contains(".deconv.");
        match (conv_layer, name.rsplit('.').next(), t.shape().len()) {
            (true, Some("weight"), 4) => audit.conv_weights += 1,
            (true, Some("bias"), 1) => audit.conv_biases += 1,
            _ => audit.other.push(name.to_string()),
        }
    }
    audit
}
