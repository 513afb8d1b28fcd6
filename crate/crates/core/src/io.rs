//! On-disk formats: `ABTV` volumes, 16-bit PGM renders and the JSON run
//! configuration.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{DiscriminatorConfig, GeneratorConfig};
use crate::phantom::{PhantomConfig, StrataProportions};
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;
use crate::volume::{AxialSlice, Units, Volume};

const VOLUME_MAGIC: &[u8; 4] = b"ABTV";
const VOLUME_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    version: u32,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    units: Units,
}

pub fn volume_to_bytes(vol: &Volume) -> Result<Vec<u8>> {
    let header = VolumeHeader {
        version: VOLUME_VERSION,
        dims: vol.dims(),
        spacing_mm: vol.spacing_mm(),
        units: vol.units(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * vol.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in vol.voxels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn volume_from_bytes(bytes: &[u8], origin: &str) -> Result<Volume> {
    if bytes.len() < 8 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic(origin.to_string()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let Some(json) = bytes.get(8..8 + hlen) else {
        return Err(Error::TruncatedPayload { expected: 8 + hlen, found: bytes.len() });
    };
    let h: VolumeHeader =
        serde_json::from_slice(json).map_err(|e| Error::HeaderMismatch(format!("{origin}: {e}")))?;
    if h.version != VOLUME_VERSION {
        return Err(Error::HeaderMismatch(format!("{origin}: volume version {}", h.version)));
    }
    let expected = 8 + hlen + 8 * h.dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::HeaderMismatch(format!(
            "{origin}: {} trailing bytes after a {:?} payload",
            bytes.len() - expected,
            h.dims
        )));
    }
    let voxels = bytes[8 + hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Volume::new(h.dims, h.spacing_mm, h.units, voxels)
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_atomic(path, &volume_to_bytes(vol)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    volume_from_bytes(&std::fs::read(path)?, &path.display().to_string())
}

/// Display level of `v` in the window, rounded half up.
pub fn pgm_level(v: f64, window_min: f64, window_max: f64) -> u16 {
    let t = ((v - window_min) / (window_max - window_min)).clamp(0.0, 1.0);
    let t = if t.is_nan() { 0.0 } else { t };
    (65535.0 * t + 0.5).floor() as u16
}

/// Binary 16-bit PGM: one image row per `x`, `ny` columns, big-endian samples.
pub fn pgm_bytes(slice: &AxialSlice, window_min: f64, window_max: f64) -> Result<Vec<u8>> {
    if !(window_max > window_min) || !window_min.is_finite() || !window_max.is_finite() {
        return Err(Error::InvalidWindow { min: window_min, max: window_max });
    }
    let mut out = format!("P5\n{} {}\n65535\n", slice.ny, slice.nx).into_bytes();
    for &v in &slice.pixels {
        out.extend_from_slice(&pgm_level(v, window_min, window_max).to_be_bytes());
    }
    Ok(out)
}

pub fn render_slice_pgm(slice: &AxialSlice, window_min: f64, window_max: f64, path: &Path) -> Result<()> {
    write_atomic(path, &pgm_bytes(slice, window_min, window_max)?)
}

/// Cohort-level phantom settings that sit next to the per-subject ones in
/// the `phantom` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSettings {
    pub subjects: usize,
    pub seed: u64,
    pub strata: StrataProportions,
}

impl Default for CohortSettings {
    fn default() -> Self {
        Self { subjects: 200, seed: 11, strata: StrataProportions::default() }
    }
}

#[derive(Clone, Default, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub test_fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// SSIM/PSNR range; defaults to the phantom's largest SUVR.
    pub data_range: Option<f64>,
    /// Difference maps render over `[-w, w]`.
    pub difference_window: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { data_range: None, difference_window: 1.0 }
    }
}

/// Everything a pipeline run needs. Sections and their keys:
/// `phantom` (cohort settings plus the subject model), `preprocess`,
/// `model` (`generator`, `discriminator`), `train` (loop settings plus
/// `test_fraction`) and `eval`. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub cohort: CohortSettings,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub split: SplitSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 5] = ["phantom", "preprocess", "model", "train", "eval"];

fn fields_of<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn parse_as<T: serde::de::DeserializeOwned>(section: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::ConfigParse(format!("section `{section}`: {e}")))
}

/// Splits one section object into the keys belonging to `T` and the rest.
fn take_fields<T: Serialize + Default>(obj: &mut Map<String, Value>) -> Value {
    let names = fields_of::<T>();
    let mut taken = Map::new();
    for n in names {
        if let Some(v) = obj.remove(&n) {
            taken.insert(n, v);
        }
    }
    Value::Object(taken)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let Value::Object(mut root) = root else {
            return Err(Error::ConfigParse("top level must be an object".into()));
        };
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::ConfigParse(format!("unknown section `{k}`, expected one of {SECTIONS:?}")));
        }
        let mut section = |name: &str| -> Result<Map<String, Value>> {
            match root.remove(name) {
                None => Ok(Map::new()),
                Some(Value::Object(m)) => Ok(m),
                Some(_) => Err(Error::ConfigParse(format!("section `{name}` must be an object"))),
            }
        };
        let mut phantom = section("phantom")?;
        let preprocess = section("preprocess")?;
        let model = section("model")?;
        let mut train = section("train")?;
        let eval = section("eval")?;
        let cfg = Self {
            cohort: parse_as("phantom", take_fields::<CohortSettings>(&mut phantom))?,
            phantom: parse_as("phantom", Value::Object(phantom))?,
            preprocess: parse_as("preprocess", Value::Object(preprocess))?,
            model: parse_as("model", Value::Object(model))?,
            split: parse_as("train", take_fields::<SplitSettings>(&mut train))?,
            train: parse_as("train", Value::Object(train))?,
            eval: parse_as("eval", Value::Object(eval))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ConfigParse(m) => Error::ConfigParse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The effective configuration in the same layout `from_json` reads.
    pub fn to_json(&self) -> Result<String> {
        let merge = |a: Value, b: Value| -> Value {
            let (Value::Object(mut a), Value::Object(b)) = (a, b) else { unreachable!("configs serialise as objects") };
            a.extend(b);
            Value::Object(a)
        };
        let doc = serde_json::json!({
            "phantom": merge(serde_json::to_value(&self.cohort)?, serde_json::to_value(&self.phantom)?),
            "preprocess": self.preprocess,
            "model": self.model,
            "train": merge(serde_json::to_value(&self.split)?, serde_json::to_value(&self.train)?),
            "eval": self.eval,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Sets every seed in the run: cohort sampling, the split and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.cohort.seed = seed;
        self.train.seed = seed;
    }

    pub fn data_range(&self) -> f64 {
        self.eval.data_range.unwrap_or_else(|| self.phantom.max_suvr())
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.cohort.strata.validate()?;
        if self.cohort.subjects == 0 {
            return Err(Error::InvalidHyperparam("phantom.subjects must be at least 1".into()));
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::InvalidHyperparam(format!("test_fraction {} outside (0, 1)", self.split.test_fraction)));
        }
        self.model.generator.validate()?;
        self.model.discriminator.validate()?;
        let [nx, ny, _] = self.phantom.dims;
        self.model.generator.check_input(&[1, self.model.generator.in_channels, nx, ny])?;
        if self.model.discriminator.image_size != [nx, ny] {
            return Err(Error::InvalidHyperparam(format!(
                "discriminator image_size {:?} differs from phantom slices {nx}x{ny}",
                self.model.discriminator.image_size
            )));
        }
        self.train.validate()?;
        if let Some(r) = self.eval.data_range {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidRange(r));
            }
        }
        if !(self.eval.difference_window > 0.0) {
            return Err(Error::InvalidHyperparam(format!("difference_window {}", self.eval.difference_window)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_and_damage() {
        let v = Volume::new([3, 2, 2], [1.0, 2.0, 0.5], Units::SuvrDifference, (0..12).map(|i| i as f64 * 0.1 - 0.3).collect())
            .unwrap();
        let b = volume_to_bytes(&v).unwrap();
        assert_eq!(volume_from_bytes(&b, "m").unwrap(), v);
        assert!(matches!(volume_from_bytes(&b[..b.len() - 1], "m"), Err(Error::TruncatedPayload { .. })));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(volume_from_bytes(&long, "m"), Err(Error::HeaderMismatch(_))));
        let mut bad = b;
        bad[3] = b'X';
        assert!(matches!(volume_from_bytes(&bad, "m"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn pgm_levels() {
        assert_eq!(pgm_level(0.0, 0.0, 2.0), 0);
        assert_eq!(pgm_level(2.0, 0.0, 2.0), 65535);
        assert_eq!(pgm_level(1.0, 0.0, 2.0), 32768);
        assert_eq!(pgm_level(-5.0, 0.0, 2.0), 0);
        assert_eq!(pgm_level(f64::NAN, 0.0, 2.0), 0);
        let s = AxialSlice::constant(2, 3, 1.0);
        let b = pgm_bytes(&s, 0.0, 2.0).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(b.len(), 13 + 12);
        assert!(matches!(pgm_bytes(&s, 1.0, 1.0), Err(Error::InvalidWindow { .. })));
    }

    #[test]
    fn config_defaults_and_typos() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3, "test_fraction": 0.25}, "phantom": {"subjects": 9}}"#)
            .unwrap();
        assert_eq!((c.train.epochs, c.split.test_fraction, c.cohort.subjects), (3, 0.25, 9));
        let Err(Error::ConfigParse(m)) = RunConfig::from_json(r#"{"train": {"epcohs": 3}}"#) else {
            panic!("typo accepted")
        };
        assert!(m.contains("epcohs"), "{m}");
        let Err(Error::ConfigParse(m)) = RunConfig::from_json(r#"{"trian": {}}"#) else { panic!("typo accepted") };
        assert!(m.contains("trian"), "{m}");
    }
}
