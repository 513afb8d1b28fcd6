//! The `amyloid-synth` command line. Every stage reads and writes under one
//! work directory:
//!
//! ```text
//! data/          cohort.json, template_mri.abtv, <id>/{mri, pet_frame_NN}.abtv, <id>/frames.json
//! preprocessed/  <id>/{mri, pet_suvr, mask}.abtv, <id>/registration.json
//! train/         split.json, loss_log.csv, model.ckpt, checkpoints/
//! synth/         <id>.abtv
//! eval/          metrics.csv, summary.json, diff/<id>.abtv
//! report/        <id>_{mri, pet, synth, diff}.pgm, summary.txt
//! ```

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{difference_map, synthesize, volume_metrics, CohortReport, Histogram};
use crate::io::{read_volume, render_slice_pgm, write_atomic, write_volume, RunConfig};
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::phantom::{generate_cohort, generate_subject, reference_region, template_mri, PhantomConfig, SubjectRecord};
use crate::preprocess::{preprocess_subject, AffineTransform, BrainMask, PreprocessedSubject, RegistrationResult};
use crate::train::{loss_log_csv, stratified_split, train, SliceDataset, SplitManifest, TrainOptions};
use crate::volume::{AxialSlice, FrameSequence, Volume};

#[derive(Parser)]
#[command(name = "amyloid-synth", about = "Synthesize amyloid PET from structural MRI on phantom cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Root of the stage directories.
    #[arg(long, default_value = "work")]
    work: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides the cohort size.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Register, brain-extract and SUVR-normalise every subject.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Split the cohort and train the generator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from train/checkpoints/latest.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Write synthetic PET for every held-out subject.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; defaults to train/model.ckpt.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score held-out synthetic PET against the real scans.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render slices and a text summary of the evaluation.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Runs one subcommand (`args` excludes the program name) with the process's
/// standard streams. Returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

/// As [`run`], with explicit output and error streams. Failures print one
/// line `error: <kind>: <message>` to `err`; exit 2 for usage and
/// configuration problems, 1 for anything that fails while running.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = std::iter::once(OsString::from("amyloid-synth")).chain(args.into_iter().map(Into::into)).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    return 0;
                }
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let name = argv.get(1).map(|a| a.to_string_lossy().into_owned()).unwrap_or_default();
                    report_error(err, &Error::UnknownCommand(name));
                }
                _ => {
                    let msg = e.render().to_string();
                    let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
                    let _ = writeln!(err, "error: Usage: {first}");
                }
            }
            return 2;
        }
    };
    let (common, stage) = match &cli.command {
        Command::GenData { common, .. } => (common, "gen-data"),
        Command::Preprocess { common } => (common, "preprocess"),
        Command::Train { common, .. } => (common, "train"),
        Command::Synthesize { common, .. } => (common, "synthesize"),
        Command::Evaluate { common, .. } => (common, "evaluate"),
        Command::Report { common } => (common, "report"),
    };
    let cfg = match load_config(common, &cli.command) {
        Ok(c) => c,
        Err(e) => {
            report_error(err, &e);
            return 2;
        }
    };
    let work = Workdir(common.work.clone());
    let result = match &cli.command {
        Command::GenData { .. } => gen_data(&cfg, &work),
        Command::Preprocess { .. } => preprocess(&cfg, &work),
        Command::Train { resume, .. } => train_stage(&cfg, &work, *resume),
        Command::Synthesize { model, .. } => synthesize_stage(&work, model.as_deref()),
        Command::Evaluate { model, .. } => evaluate_stage(&cfg, &work, model.as_deref()),
        Command::Report { .. } => report_stage(&cfg, &work),
    };
    match result {
        Ok(summary) => {
            let _ = writeln!(out, "{stage}: {summary}");
            0
        }
        Err(e) => {
            report_error(err, &e);
            1
        }
    }
}

/// Short variant name used as the machine-readable error kind.
fn error_kind(e: &Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

fn report_error(err: &mut dyn Write, e: &Error) {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    let _ = writeln!(err, "error: {}: {msg}", error_kind(e));
}

fn load_config(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    match command {
        Command::GenData { subjects: Some(n), .. } => cfg.cohort.subjects = *n,
        Command::Train { epochs: Some(e), .. } => cfg.train.epochs = *e,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Workdir(PathBuf);

impl Workdir {
    fn data(&self) -> PathBuf {
        self.0.join("data")
    }
    fn preprocessed(&self, id: &str) -> PathBuf {
        self.0.join("preprocessed").join(id)
    }
    fn train(&self) -> PathBuf {
        self.0.join("train")
    }
    fn synth(&self) -> PathBuf {
        self.0.join("synth")
    }
    fn eval(&self) -> PathBuf {
        self.0.join("eval")
    }
    fn report(&self) -> PathBuf {
        self.0.join("report")
    }
}

/// `data/cohort.json`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub phantom: PhantomConfig,
    pub subjects: Vec<SubjectRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameTimes {
    start_min: Vec<f64>,
    end_min: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistrationSidecar {
    mri_to_template: AffineTransform,
    pet_to_mri: AffineTransform,
    pet_registration: RegistrationResult,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn gen_data(cfg: &RunConfig, work: &Workdir) -> Result<String> {
    let dir = work.data();
    let records = generate_cohort(cfg.cohort.subjects, &cfg.cohort.strata, cfg.cohort.seed, cfg.phantom.burden_max)?;
    write_volume(&dir.join("template_mri.abtv"), &template_mri(&cfg.phantom)?)?;
    for rec in &records {
        let s = generate_subject(rec, &cfg.phantom)?;
        let sub = dir.join(&rec.id);
        write_volume(&sub.join("mri.abtv"), &s.mri)?;
        for (k, f) in s.pet_frames.frames().iter().enumerate() {
            write_volume(&sub.join(format!("pet_frame_{k:02}.abtv")), f)?;
        }
        let times = FrameTimes { start_min: s.pet_frames.start_min().to_vec(), end_min: s.pet_frames.end_min().to_vec() };
        write_json(&sub.join("frames.json"), &times)?;
        write_json(&sub.join("misalignment.json"), &s.misalignment)?;
    }
    write_json(&dir.join("cohort.json"), &CohortManifest { phantom: cfg.phantom.clone(), subjects: records.clone() })?;
    Ok(format!("{} subjects in {}", records.len(), dir.display()))
}

fn read_cohort(work: &Workdir) -> Result<CohortManifest> {
    read_json(&work.data().join("cohort.json"))
}

fn read_frames(dir: &Path) -> Result<FrameSequence> {
    let times: FrameTimes = read_json(&dir.join("frames.json"))?;
    let frames = (0..times.start_min.len())
        .map(|k| read_volume(&dir.join(format!("pet_frame_{k:02}.abtv"))))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, times.start_min, times.end_min)
}

fn preprocess(cfg: &RunConfig, work: &Workdir) -> Result<String> {
    let cohort = read_cohort(work)?;
    let template = read_volume(&work.data().join("template_mri.abtv"))?;
    let reference = reference_region(template.dims());
    let mut unconverged = 0;
    for rec in &cohort.subjects {
        let src = work.data().join(&rec.id);
        let mri = read_volume(&src.join("mri.abtv"))?;
        let frames = read_frames(&src)?;
        let p = preprocess_subject(&mri, &frames, &template, &reference, &cfg.preprocess)?;
        unconverged += usize::from(!p.pet_registration.converged);
        save_preprocessed(&work.preprocessed(&rec.id), &p)?;
    }
    Ok(format!(
        "{} subjects ({unconverged} registrations stopped at the iteration cap)",
        cohort.subjects.len()
    ))
}

fn save_preprocessed(dir: &Path, p: &PreprocessedSubject) -> Result<()> {
    write_volume(&dir.join("mri.abtv"), &p.mri)?;
    write_volume(&dir.join("pet_suvr.abtv"), &p.pet_suvr)?;
    write_volume(&dir.join("mask.abtv"), &p.mask.to_volume(p.mri.spacing_mm()))?;
    write_json(
        &dir.join("registration.json"),
        &RegistrationSidecar {
            mri_to_template: p.mri_to_template,
            pet_to_mri: p.pet_to_mri,
            pet_registration: p.pet_registration.clone(),
        },
    )
}

fn load_preprocessed(work: &Workdir, id: &str) -> Result<PreprocessedSubject> {
    let dir = work.preprocessed(id);
    if !dir.is_dir() {
        return Err(Error::MissingSubjectData(id.to_string()));
    }
    let mask = read_volume(&dir.join("mask.abtv"))?;
    let mask = BrainMask::new(mask.dims(), mask.voxels().iter().map(|&v| v > 0.5).collect())?;
    let reg: RegistrationSidecar = read_json(&dir.join("registration.json"))?;
    Ok(PreprocessedSubject {
        mri: read_volume(&dir.join("mri.abtv"))?,
        pet_suvr: read_volume(&dir.join("pet_suvr.abtv"))?,
        mask,
        mri_to_template: reg.mri_to_template,
        pet_to_mri: reg.pet_to_mri,
        pet_registration: reg.pet_registration,
    })
}

fn train_stage(cfg: &RunConfig, work: &Workdir, resume: bool) -> Result<String> {
    let cohort = read_cohort(work)?;
    let split = stratified_split(&cohort.subjects, cfg.split.test_fraction, cfg.train.seed)?;
    let dir = work.train();
    write_json(&dir.join("split.json"), &split)?;
    let subjects = split
        .train_ids
        .iter()
        .map(|id| Ok((id.clone(), load_preprocessed(work, id)?)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = SliceDataset::from_subjects(subjects.iter().map(|(id, s)| (id.as_str(), s)))?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let options = TrainOptions {
        checkpoint_dir: Some(ckpt_dir.clone()),
        held_out: split.test_ids.iter().cloned().collect::<BTreeSet<_>>(),
        resume: if resume { Some(read_checkpoint(&ckpt_dir.join("latest.ckpt"))?) } else { None },
    };
    let outcome = train(&dataset, &cfg.model.generator, &cfg.model.discriminator, &cfg.train, &options)?;
    write_checkpoint(&dir.join("model.ckpt"), &outcome.checkpoint)?;
    write_atomic(&dir.join("loss_log.csv"), loss_log_csv(&outcome.log).as_bytes())?;
    let last = outcome.log.last().map(|l| l.g_masked_l1).unwrap_or(f64::NAN);
    Ok(format!(
        "{} epochs on {} slices from {} subjects, final masked L1 {last:.5}",
        outcome.log.len(),
        dataset.len(),
        split.train_ids.len()
    ))
}

fn load_model(work: &Workdir, model: Option<&Path>) -> Result<Checkpoint> {
    read_checkpoint(&model.map(Path::to_path_buf).unwrap_or_else(|| work.train().join("model.ckpt")))
}

fn read_split(work: &Workdir) -> Result<SplitManifest> {
    read_json(&work.train().join("split.json"))
}

fn synthesize_stage(work: &Workdir, model: Option<&Path>) -> Result<String> {
    let ckpt = load_model(work, model)?;
    let split = read_split(work)?;
    for id in &split.test_ids {
        let s = load_preprocessed(work, id)?;
        let synth = synthesize(&ckpt.generator_config, &ckpt.generator, &s.mri, &s.mask)?;
        write_volume(&work.synth().join(format!("{id}.abtv")), &synth)?;
    }
    Ok(format!("{} volumes in {}", split.test_ids.len(), work.synth().display()))
}

fn evaluate_stage(cfg: &RunConfig, work: &Workdir, model: Option<&Path>) -> Result<String> {
    let ckpt = load_model(work, model)?;
    let split = read_split(work)?;
    let range = cfg.data_range();
    let mut records = Vec::with_capacity(split.test_ids.len());
    for id in &split.test_ids {
        let s = load_preprocessed(work, id)?;
        let synth = synthesize(&ckpt.generator_config, &ckpt.generator, &s.mri, &s.mask)?;
        records.push(volume_metrics(id, &s.pet_suvr, &synth, &s.mask, range)?);
        write_volume(&work.eval().join("diff").join(format!("{id}.abtv")), &difference_map(&s.pet_suvr, &synth, &s.mask)?)?;
        write_volume(&work.synth().join(format!("{id}.abtv")), &synth)?;
    }
    let report = CohortReport::from_records(records)?;
    write_atomic(&work.eval().join("metrics.csv"), report.to_csv().as_bytes())?;
    write_json(&work.eval().join("summary.json"), &report)?;
    Ok(format!(
        "{} subjects, mean SSIM {:.4}, mean PSNR {:.2} dB, global SUVR R² {:.4}",
        report.records.len(),
        report.ssim.mean,
        report.psnr_db.mean,
        report.r_squared
    ))
}

/// Axial index with the largest mask area.
fn widest_slice(mask: &BrainMask) -> usize {
    (0..mask.dims()[2]).max_by_key(|&z| (mask.axial_plane(z).iter().filter(|&&b| b).count(), std::cmp::Reverse(z))).unwrap_or(0)
}

fn plane(vol: &Volume, z: usize) -> Result<AxialSlice> {
    let [nx, ny, _] = vol.dims();
    AxialSlice::new(nx, ny, vol.axial_plane(z))
}

fn histogram_text(out: &mut String, name: &str, h: &Histogram) {
    let _ = writeln!(out, "{name} histogram:");
    for (k, c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "  [{:.4}, {:.4}) {c}", h.edges[k], h.edges[k + 1]);
    }
}

fn report_stage(cfg: &RunConfig, work: &Workdir) -> Result<String> {
    let report: CohortReport = read_json(&work.eval().join("summary.json"))?;
    let range = cfg.data_range();
    let w = cfg.eval.difference_window;
    let dir = work.report();
    for r in &report.records {
        let id = &r.subject_id;
        let s = load_preprocessed(work, id)?;
        let synth = read_volume(&work.synth().join(format!("{id}.abtv")))?;
        let diff = read_volume(&work.eval().join("diff").join(format!("{id}.abtv")))?;
        let z = widest_slice(&s.mask);
        let mri_max = s.mri.voxels().iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        render_slice_pgm(&plane(&s.mri, z)?, 0.0, mri_max, &dir.join(format!("{id}_mri.pgm")))?;
        render_slice_pgm(&plane(&s.pet_suvr, z)?, 0.0, range, &dir.join(format!("{id}_pet.pgm")))?;
        render_slice_pgm(&plane(&synth, z)?, 0.0, range, &dir.join(format!("{id}_synth.pgm")))?;
        render_slice_pgm(&plane(&diff, z)?, -w, w, &dir.join(format!("{id}_diff.pgm")))?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "subjects: {}", report.records.len());
    let _ = writeln!(text, "SSIM: mean {:.4}, std {:.4}", report.ssim.mean, report.ssim.std);
    let _ = writeln!(text, "PSNR (dB): mean {:.3}, std {:.3}", report.psnr_db.mean, report.psnr_db.std);
    let _ = writeln!(text, "global SUVR R²: {:.4}", report.r_squared);
    let _ = writeln!(text, "global SUVR true: mean {:.4}, std {:.4}", report.suvr_true.mean, report.suvr_true.std);
    let _ = writeln!(text, "global SUVR synthetic: mean {:.4}, std {:.4}", report.suvr_synth.mean, report.suvr_synth.std);
    histogram_text(&mut text, "SSIM", &report.ssim_histogram);
    histogram_text(&mut text, "PSNR", &report.psnr_histogram);
    write_atomic(&dir.join("summary.txt"), text.as_bytes())?;
    Ok(format!("{} subjects rendered to {}", report.records.len(), dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_command_is_a_usage_error() {
        let (code, out, err) = call(&["transmogrify"]);
        assert_eq!(code, 2);
        assert!(out.is_empty());
        assert!(err.starts_with("error: UnknownCommand:"), "{err}");
        assert_eq!(err.lines().count(), 1);
    }

    #[test]
    fn config_typo_names_the_key() {
        let dir = std::env::temp_dir().join(format!("abt-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        std::fs::write(&path, r#"{"train": {"epcohs": 2}}"#).unwrap();
        let (code, _, err) = call(&["train", "--config", path.to_str().unwrap(), "--work", dir.to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(err.starts_with("error: ConfigParse:") && err.contains("epcohs"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_inputs_are_runtime_failures() {
        let dir = std::env::temp_dir().join(format!("abt-cli-empty-{}", std::process::id()));
        let (code, out, err) = call(&["preprocess", "--work", dir.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(out.is_empty());
        assert!(err.starts_with("error: Io:"), "{err}");
    }
}
