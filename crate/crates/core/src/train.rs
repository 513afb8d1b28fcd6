//! Stratified train/test splitting and the alternating adversarial loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    adversarial_losses, discriminator_forward, generator_forward, generator_objective, init_discriminator,
    init_generator, masked_l1_loss, write_checkpoint, Checkpoint, DiscriminatorConfig, GeneratorConfig, LossWeights,
    Mode, OptimizerState,
};
use crate::phantom::{largest_remainder, stratum_name, SubjectRecord};
use crate::preprocess::{slice_axial, PreprocessedSubject};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{adam_step, AdamConfig, AdamState, ModelParams, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub generator_optimizer: AdamConfig,
    pub discriminator_optimizer: AdamConfig,
    /// Write a checkpoint after every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            seed: 7,
            generator_optimizer: AdamConfig { learning_rate: 6e-4, ..Default::default() },
            discriminator_optimizer: AdamConfig { learning_rate: 6e-4, ..Default::default() },
            checkpoint_every: 1,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidHyperparam(format!(
                "epochs {} and batch size {} must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        self.generator_optimizer.validate()?;
        self.discriminator_optimizer.validate()?;
        self.loss_weights.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumSplit {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Per `sex/impairment` stratum.
    pub strata: BTreeMap<String, StratumSplit>,
}

/// Splits per (sex × impairment) stratum. Test counts are the stratum quotas
/// apportioned by largest remainder so they add up to `round(n·f)`; members
/// are drawn in a seeded order.
pub fn stratified_split(cohort: &[SubjectRecord], test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidHyperparam(format!("test fraction {test_fraction}")));
    }
    let mut groups: BTreeMap<String, Vec<&SubjectRecord>> = BTreeMap::new();
    for r in cohort {
        groups.entry(stratum_name(r.sex, r.impairment)).or_default().push(r);
    }
    let n = cohort.len();
    let total_test = (n as f64 * test_fraction).round() as usize;
    if total_test == 0 || total_test == n {
        return Err(Error::StratumTooSmall(format!(
            "{n} subjects cannot give both sides a member at test fraction {test_fraction}"
        )));
    }
    let weights: Vec<(String, f64)> = groups.iter().map(|(k, v)| (k.clone(), v.len() as f64)).collect();
    let counts = largest_remainder(total_test, &weights);

    let mut manifest = SplitManifest {
        seed,
        test_fraction,
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        strata: BTreeMap::new(),
    };
    for (k, ((name, members), &take)) in groups.iter().zip(&counts).enumerate() {
        if take > members.len() {
            return Err(Error::StratumTooSmall(name.clone()));
        }
        let mut ids: Vec<&str> = members.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng_from(derive_seed(&[seed, k as u64])));
        manifest.test_ids.extend(ids[..take].iter().map(|s| s.to_string()));
        manifest.train_ids.extend(ids[take..].iter().map(|s| s.to_string()));
        manifest.strata.insert(name.clone(), StratumSplit { train: members.len() - take, test: take });
    }
    manifest.train_ids.sort();
    manifest.test_ids.sort();
    Ok(manifest)
}

/// One paired axial slice with its brain mask (0/1).
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub subject_id: String,
    pub z: usize,
    pub mri: Vec<f64>,
    pub pet: Vec<f64>,
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SliceDataset {
    pub height: usize,
    pub width: usize,
    pub pairs: Vec<SlicePair>,
}

impl SliceDataset {
    /// Axial slices of every subject, skipping slices with an empty mask.
    pub fn from_subjects<'a>(subjects: impl IntoIterator<Item = (&'a str, &'a PreprocessedSubject)>) -> Result<Self> {
        let mut out = SliceDataset::default();
        for (id, s) in subjects {
            let [nx, ny, _] = s.mri.dims();
            if out.pairs.is_empty() {
                (out.height, out.width) = (nx, ny);
            } else if (nx, ny) != (out.height, out.width) {
                return Err(Error::ShapeMismatch(format!("subject {id} is {nx}x{ny}")));
            }
            let mri = slice_axial(&s.mri);
            let pet = slice_axial(&s.pet_suvr);
            for (z, (m, p)) in mri.into_iter().zip(pet).enumerate() {
                let mask: Vec<f64> = s.mask.axial_plane(z).iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                if mask.iter().any(|&v| v > 0.0) {
                    out.pairs.push(SlicePair { subject_id: id.to_string(), z, mri: m.pixels, pet: p.pixels, mask });
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subject_ids(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.subject_id.as_str()).collect()
    }

    fn batch(&self, idx: &[usize]) -> Result<[Tensor; 3]> {
        let shape = vec![idx.len(), 1, self.height, self.width];
        let gather = |f: fn(&SlicePair) -> &Vec<f64>| {
            let data = idx.iter().flat_map(|&i| f(&self.pairs[i]).iter().copied()).collect();
            Tensor::new(shape.clone(), data)
        };
        Ok([gather(|p| &p.mri)?, gather(|p| &p.pet)?, gather(|p| &p.mask)?])
    }
}

/// Mean losses of one epoch and the number of updates behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_masked_l1: f64,
    pub d_updates: usize,
    pub g_updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Progress {
    epochs_completed: usize,
    train: TrainConfig,
    log: Vec<EpochLog>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints land here as `epoch-NNNN.ckpt` plus `latest.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Subject ids that must never reach a training batch.
    pub held_out: BTreeSet<String>,
    /// Continue from a checkpoint written by an earlier run of this loop.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final weights and optimizer state.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn grads_of(tape: &Tape, vars: &[Var], params: &ModelParams) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Per batch: one discriminator update on the real pair and a detached fake,
/// then one generator update against the refreshed discriminator.
pub fn train(
    dataset: &SliceDataset,
    generator_config: &GeneratorConfig,
    discriminator_config: &DiscriminatorConfig,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    generator_config.validate()?;
    discriminator_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::DegenerateData("empty training set".into()));
    }
    if let Some(id) = dataset.subject_ids().into_iter().find(|id| options.held_out.contains(*id)) {
        return Err(Error::SplitLeak(id.to_string()));
    }
    generator_config.check_input(&[1, generator_config.in_channels, dataset.height, dataset.width])?;

    let (mut g_params, mut d_params, mut g_opt, mut d_opt, mut log, start) = match &options.resume {
        Some(c) => {
            let progress: Progress = serde_json::from_value(c.progress.clone())?;
            if c.generator_config != *generator_config || c.discriminator_config != *discriminator_config {
                return Err(Error::HeaderMismatch("checkpoint model configs differ from the requested ones".into()));
            }
            // Only the epoch budget may change between runs.
            if (TrainConfig { epochs: 0, ..progress.train }) != (TrainConfig { epochs: 0, ..config.clone() }) {
                return Err(Error::HeaderMismatch("checkpoint training config differs".into()));
            }
            let Some(opt) = c.optimizer.clone() else {
                return Err(Error::HeaderMismatch("checkpoint has no optimizer state".into()));
            };
            (
                c.generator.clone(),
                c.discriminator.clone(),
                opt.generator,
                opt.discriminator,
                progress.log,
                progress.epochs_completed,
            )
        }
        None => {
            let mut rng = rng_from(derive_seed(&[config.seed, 0x1417]));
            let g = init_generator(generator_config, &mut rng)?;
            let d = init_discriminator(discriminator_config, &mut rng)?;
            let go = AdamState::new(config.generator_optimizer, &g);
            let dop = AdamState::new(config.discriminator_optimizer, &d);
            (g, d, go, dop, Vec::new(), 0)
        }
    };

    let n = dataset.len();
    let batches = n.div_ceil(config.batch_size);
    let snapshot = |g: &ModelParams, d: &ModelParams, go: &AdamState, dop: &AdamState, log: &[EpochLog], done: usize| {
        let progress = Progress { epochs_completed: done, train: config.clone(), log: log.to_vec() };
        Ok::<_, Error>(Checkpoint {
            generator_config: generator_config.clone(),
            discriminator_config: discriminator_config.clone(),
            generator: g.clone(),
            discriminator: d.clone(),
            optimizer: Some(OptimizerState { generator: go.clone(), discriminator: dop.clone() }),
            progress: serde_json::to_value(progress)?,
        })
    };

    for epoch in start..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_seed(&[config.seed, epoch as u64])));
        let mut sums = [0.0; 3];
        let mut updates = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let [mri, pet, mask] = dataset.batch(idx)?;
            let dropout_seed = derive_seed(&[config.seed, epoch as u64, b as u64]);

            let mut gt = Tape::new();
            let g_vars = g_params.record(&mut gt, true);
            let g_in = gt.constant(mri.clone());
            let fake = generator_forward(&mut gt, generator_config, &g_vars, g_in, Mode::Train { seed: dropout_seed })?;

            let mut dt = Tape::new();
            let d_vars = d_params.record(&mut dt, true);
            let (m, p, f) = (dt.constant(mri.clone()), dt.constant(pet.clone()), dt.constant(gt.value(fake).clone()));
            let d_real = discriminator_forward(&mut dt, discriminator_config, &d_vars, m, p)?;
            let d_fake = discriminator_forward(&mut dt, discriminator_config, &d_vars, m, f)?;
            let (d_loss, _) = adversarial_losses(&mut dt, d_real, d_fake);
            let d_value = scalar(&dt, d_loss);
            if !d_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            dt.backward(d_loss)?;
            let grads = grads_of(&dt, &d_vars, &d_params);
            adam_step(&mut d_params, &grads, &mut d_opt)?;

            let d_frozen = d_params.record(&mut gt, false);
            let (m, p, k) = (gt.constant(mri), gt.constant(pet), gt.constant(mask));
            let d_on_fake = discriminator_forward(&mut gt, discriminator_config, &d_frozen, m, fake)?;
            let d_on_real = gt.constant(Tensor::full(&[idx.len(), 1], 0.5));
            let (_, g_adv) = adversarial_losses(&mut gt, d_on_real, d_on_fake);
            let l1 = masked_l1_loss(&mut gt, fake, p, k)?;
            let objective = generator_objective(&mut gt, g_adv, l1, &config.loss_weights)?;
            let (adv_value, l1_value) = (scalar(&gt, g_adv), scalar(&gt, l1));
            if !(adv_value.is_finite() && l1_value.is_finite() && scalar(&gt, objective).is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            gt.backward(objective)?;
            let grads = grads_of(&gt, &g_vars, &g_params);
            adam_step(&mut g_params, &grads, &mut g_opt)?;

            sums[0] += d_value;
            sums[1] += adv_value;
            sums[2] += l1_value;
            updates += 1;
        }
        debug_assert_eq!(updates, batches);
        let k = updates as f64;
        log.push(EpochLog {
            epoch,
            d_loss: sums[0] / k,
            g_adv: sums[1] / k,
            g_masked_l1: sums[2] / k,
            d_updates: updates,
            g_updates: updates,
        });

        let done = epoch + 1;
        let due = done == config.epochs || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0);
        if let (Some(dir), true) = (&options.checkpoint_dir, due) {
            std::fs::create_dir_all(dir)?;
            let ckpt = snapshot(&g_params, &d_params, &g_opt, &d_opt, &log, done)?;
            write_checkpoint(&dir.join(format!("epoch-{done:04}.ckpt")), &ckpt)?;
            write_checkpoint(&dir.join("latest.ckpt"), &ckpt)?;
        }
    }

    let checkpoint = snapshot(&g_params, &d_params, &g_opt, &d_opt, &log, config.epochs)?;
    Ok(TrainOutcome { checkpoint, log })
}

/// Epoch count recorded in a checkpoint written by [`train`].
pub fn epochs_completed(ckpt: &Checkpoint) -> Result<usize> {
    let progress: Progress = serde_json::from_value(ckpt.progress.clone())?;
    Ok(progress.epochs_completed)
}

/// `epoch,d_loss,g_adv,g_masked_l1` with a header row.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,d_loss,g_adv,g_masked_l1\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.d_loss, e.g_adv, e.g_masked_l1);
    }
    out
}
