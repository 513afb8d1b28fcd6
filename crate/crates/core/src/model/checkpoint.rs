//! Single-file model checkpoint: magic `ABTC`, a u32 LE manifest length, the
//! JSON manifest, then every tensor as raw f64 LE in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiscriminatorConfig, GeneratorConfig};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ModelParams, Tensor};

const MAGIC: &[u8; 4] = b"ABTC";
const VERSION: u32 = 1;

/// Adam moments for both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub generator: AdamState,
    pub discriminator: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator_config: GeneratorConfig,
    pub discriminator_config: DiscriminatorConfig,
    pub generator: ModelParams,
    pub discriminator: ModelParams,
    /// Present for resumable training checkpoints.
    pub optimizer: Option<OptimizerState>,
    /// Opaque training bookkeeping (epochs done, seed, ...).
    pub progress: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    generator_config: GeneratorConfig,
    discriminator_config: DiscriminatorConfig,
    generator: Vec<Entry>,
    discriminator: Vec<Entry>,
    optimizer: Option<[AdamHeader; 2]>,
    progress: serde_json::Value,
}

fn entries(p: &ModelParams) -> Vec<Entry> {
    p.iter().map(|(n, t)| Entry { name: n.to_string(), shape: t.shape().to_vec() }).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: VERSION,
            generator_config: self.generator_config.clone(),
            discriminator_config: self.discriminator_config.clone(),
            generator: entries(&self.generator),
            discriminator: entries(&self.discriminator),
            optimizer: self.optimizer.as_ref().map(|o| {
                [&o.generator, &o.discriminator].map(|s| AdamHeader { config: s.config, step_count: s.step_count })
            }),
            progress: self.progress.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for t in self.generator.tensors().chain(self.discriminator.tensors()) {
            put(t.data());
        }
        if let Some(o) = &self.optimizer {
            for s in [&o.generator, &o.discriminator] {
                s.first_moment.iter().chain(&s.second_moment).for_each(|m| put(m));
            }
        }
        Ok(out)
    }

    fn payload_len(&self) -> usize {
        let n = self.generator.num_scalars() + self.discriminator.num_scalars();
        n + if self.optimizer.is_some() { 2 * n } else { 0 }
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(origin.to_string()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let Some(json) = bytes.get(8..8 + hlen) else {
            return Err(Error::TruncatedPayload { expected: 8 + hlen, found: bytes.len() });
        };
        let m: Manifest = serde_json::from_slice(json)?;
        if m.version != VERSION {
            return Err(Error::HeaderMismatch(format!("checkpoint version {}", m.version)));
        }
        let scalars = |es: &[Entry]| es.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>();
        let n = scalars(&m.generator) + scalars(&m.discriminator);
        let total = n * if m.optimizer.is_some() { 3 } else { 1 };
        let payload = &bytes[8 + hlen..];
        if payload.len() != 8 * total {
            return Err(Error::TruncatedPayload { expected: 8 + hlen + 8 * total, found: bytes.len() });
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |len: usize| values.by_ref().take(len).collect::<Vec<f64>>();
        let mut params = |es: &[Entry]| -> Result<ModelParams> {
            let mut p = ModelParams::new();
            for e in es {
                let len = e.shape.iter().product();
                p.push(e.name.clone(), Tensor::new(e.shape.clone(), take(len))?);
            }
            Ok(p)
        };
        let generator = params(&m.generator)?;
        let discriminator = params(&m.discriminator)?;
        let optimizer = match m.optimizer {
            None => None,
            Some([gh, dh]) => {
                let mut state = |h: AdamHeader, p: &ModelParams| {
                    let first = p.tensors().map(|t| take(t.len())).collect();
                    let second = p.tensors().map(|t| take(t.len())).collect();
                    AdamState { config: h.config, step_count: h.step_count, first_moment: first, second_moment: second }
                };
                let g = state(gh, &generator);
                let d = state(dh, &discriminator);
                Some(OptimizerState { generator: g, discriminator: d })
            }
        };
        Ok(Self {
            generator_config: m.generator_config,
            discriminator_config: m.discriminator_config,
            generator,
            discriminator,
            optimizer,
            progress: m.progress,
        })
    }
}

/// Writes through a temporary sibling and renames, so an interrupted write
/// never clobbers the previous checkpoint.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_discriminator, init_generator};
    use crate::rng::rng_from;

    fn sample(with_optimizer: bool) -> Checkpoint {
        let gc = GeneratorConfig { depth: 2, base_filters: 2, ..Default::default() };
        let dc = DiscriminatorConfig { depth: 2, base_filters: 2, image_size: [8, 8], ..Default::default() };
        let mut rng = rng_from(5);
        let generator = init_generator(&gc, &mut rng).unwrap();
        let discriminator = init_discriminator(&dc, &mut rng).unwrap();
        let optimizer = with_optimizer.then(|| {
            let mut g = AdamState::new(AdamConfig::default(), &generator);
            g.step_count = 7;
            g.first_moment[0][0] = -1.25e-300;
            g.second_moment[1][0] = f64::MIN_POSITIVE;
            OptimizerState { generator: g, discriminator: AdamState::new(AdamConfig::default(), &discriminator) }
        });
        Checkpoint {
            generator_config: gc,
            discriminator_config: dc,
            generator,
            discriminator,
            optimizer,
            progress: serde_json::json!({"epochs_completed": 3}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for opt in [false, true] {
            let c = sample(opt);
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample(true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(Error::BadMagic(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "m"),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
