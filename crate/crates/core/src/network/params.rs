//! Named parameter store and the single-file checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! "MVTTCKP1"                  8 bytes ASCII
//! manifest length             u64 little-endian
//! manifest                    UTF-8 JSON (CheckpointManifest)
//! tensors                     f64 little-endian, concatenated in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelVariant, NetworkConfig};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVTTCKP1";

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Uniform in `[-s, s]`, `s = sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Zeros,
    /// Every entry set to the value.
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

/// Every learnable tensor of one model instance, keyed by layer path.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: ModelVariant,
    pub seed: u64,
    pub config: NetworkConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// FNV-1a; gives each layer path its own initialisation stream so that
/// variants sharing a layer also share its initial values.
fn path_hash(path: &str) -> u64 {
    path.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ModelParams {
    pub fn init(config: &NetworkConfig, variant: ModelVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in super::layout(config, variant) {
            let t = match spec.init {
                InitKind::Zeros => Tensor::zeros(&spec.shape),
                InitKind::Const(v) => Tensor::full(&spec.shape, v),
                InitKind::HeUniform { fan_in } => {
                    let s = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ path_hash(&spec.path));
                    Tensor::from_fn(&spec.shape, |_| dist.sample(&mut rng))
                }
            };
            tensors.insert(spec.path, t);
        }
        Ok(ModelParams {
            variant,
            seed,
            config: config.clone(),
            tensors,
        })
    }

    /// Same namespace as `self`, all values zero (e.g. a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            ..self.clone()
        }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::invalid("ModelParams", format!("no parameter at {path:?}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::invalid("ModelParams", format!("no parameter at {path:?}")))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(path)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ModelParams::set",
                format!("{path}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = CheckpointManifest {
            magic: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            variant: self.variant,
            seed: self.seed,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(path, t)| TensorEntry {
                    path: path.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 16 {
            return Err(FormatError::Truncated {
                section: "checkpoint preamble",
                expected: 16,
                actual: bytes.len(),
            });
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[16..];
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l <= rest.len())
            .ok_or(FormatError::Truncated {
                section: "checkpoint manifest",
                expected: usize::try_from(len).unwrap_or(usize::MAX),
                actual: rest.len(),
            })?;
        let manifest: CheckpointManifest = serde_json::from_slice(&rest[..len])
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        if manifest.magic.as_bytes() != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: manifest.magic,
            });
        }
        manifest
            .config
            .validate()
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        let blob = &rest[len..];
        let mut expected_bytes = 0usize;
        for e in &manifest.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) })
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| FormatError::MalformedHeader(format!("bad shape {:?} for {}", e.shape, e.path)))?;
            expected_bytes = expected_bytes
                .checked_add(n)
                .ok_or_else(|| FormatError::MalformedHeader("tensor sizes overflow".into()))?;
        }
        if blob.len() < expected_bytes {
            return Err(FormatError::Truncated {
                section: "checkpoint tensors",
                expected: expected_bytes,
                actual: blob.len(),
            });
        }
        if blob.len() > expected_bytes {
            return Err(FormatError::SizeMismatch {
                section: "checkpoint tensors",
                expected: expected_bytes,
                actual: blob.len(),
            });
        }
        let expected_layout = super::layout(&manifest.config, manifest.variant);
        let mut tensors = BTreeMap::new();
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::InvalidPayload(format!("non-finite value in {}", e.path)));
            }
            let t = Tensor::new(e.shape, data).map_err(|err| FormatError::InvalidPayload(err.to_string()))?;
            if tensors.insert(e.path.clone(), t).is_some() {
                return Err(FormatError::MalformedHeader(format!("duplicate tensor {}", e.path)));
            }
        }
        if expected_layout.len() != tensors.len()
            || expected_layout
                .iter()
                .any(|s| tensors.get(&s.path).map(|t| t.shape() != s.shape.as_slice()).unwrap_or(true))
        {
            return Err(FormatError::InvalidPayload(format!(
                "tensor set does not match the {} layout for this configuration",
                manifest.variant
            )));
        }
        Ok(ModelParams {
            variant: manifest.variant,
            seed: manifest.seed,
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    magic: String,
    variant: ModelVariant,
    seed: u64,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    path: String,
    shape: Vec<usize>,
}
