use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate, PhantomSpec, Volume};
use crate::error::{Error, FormatError, Result};

pub const DATASET_FORMAT: &str = "mvtt-dataset/1";
pub const MANIFEST_FILE: &str = "dataset.json";

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th phantom of a dataset seeded with `seed`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)))
}

/// Fold id per item: a seeded shuffle dealt round-robin, so sizes differ by at most one.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    if n < folds {
        return Err(Error::Config(format!("{n} volumes cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ 0x666f_6c64)));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    Ok(fold_of)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub template: PhantomSpec,
    pub volumes: Vec<Volume>,
    pub seeds: Vec<u64>,
    pub fold_of: Vec<usize>,
    pub folds: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    /// Same volumes, re-partitioned into `folds` folds.
    pub fn refold(&self, folds: usize) -> Result<Dataset> {
        Ok(Dataset {
            fold_of: assign_folds(self.len(), folds, self.seed)?,
            folds,
            ..self.clone()
        })
    }

    pub fn file_name(index: usize) -> String {
        format!("phantom_{index:03}.mvttvol")
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            seed: self.seed,
            folds: self.folds,
            template: self.template.clone(),
            volumes: (0..self.len())
                .map(|i| DatasetEntry {
                    file: Self::file_name(i),
                    seed: self.seeds[i],
                    fold: self.fold_of[i],
                })
                .collect(),
        }
    }

    /// Writes every volume plus `dataset.json` into `dir` (created if missing).
    /// Returns the written paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (i, v) in self.volumes.iter().enumerate() {
            let p = dir.join(Self::file_name(i));
            v.save(&p)?;
            written.push(p);
        }
        let p = dir.join(MANIFEST_FILE);
        crate::io_util::write_atomic(&p, &self.manifest().to_json())?;
        written.push(p);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = DatasetManifest::from_json(&bytes)?;
        let mut volumes = Vec::with_capacity(manifest.volumes.len());
        for e in &manifest.volumes {
            volumes.push(Volume::load(&dir.join(&e.file))?);
        }
        Ok(Dataset {
            seed: manifest.seed,
            folds: manifest.folds,
            seeds: manifest.volumes.iter().map(|e| e.seed).collect(),
            fold_of: manifest.volumes.iter().map(|e| e.fold).collect(),
            template: manifest.template,
            volumes,
        })
    }
}

/// `dataset.json`: which files make up a dataset and how they are folded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub folds: usize,
    pub template: PhantomSpec,
    pub volumes: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub file: String,
    pub seed: u64,
    pub fold: usize,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serialises");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, FormatError> {
        let m: DatasetManifest =
            serde_json::from_slice(bytes).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        if m.format != DATASET_FORMAT {
            return Err(FormatError::BadMagic {
                expected: DATASET_FORMAT.into(),
                found: m.format,
            });
        }
        if m.volumes.is_empty() {
            return Err(FormatError::InvalidPayload("dataset lists no volumes".into()));
        }
        if m.folds == 0 || m.volumes.len() < m.folds {
            return Err(FormatError::InvalidPayload(format!(
                "{} volumes cannot fill {} folds",
                m.volumes.len(),
                m.folds
            )));
        }
        for e in &m.volumes {
            if e.fold >= m.folds {
                return Err(FormatError::InvalidPayload(format!("{} assigned to fold {} of {}", e.file, e.fold, m.folds)));
            }
            let plain = !e.file.is_empty()
                && e.file != "."
                && e.file != ".."
                && !e.file.contains(['/', '\\'])
                && e.file != MANIFEST_FILE;
            if !plain {
                return Err(FormatError::InvalidPayload(format!("volume file name {:?} is not a plain file name", e.file)));
            }
        }
        let mut names: Vec<&str> = m.volumes.iter().map(|e| e.file.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(FormatError::InvalidPayload("duplicate volume file names".into()));
        }
        Ok(m)
    }
}

/// `n` phantoms from `template` with derived seeds, partitioned into `folds` folds.
pub fn make_dataset(n: usize, template: &PhantomSpec, seed: u64, folds: usize) -> Result<Dataset> {
    template.validate()?;
    let fold_of = assign_folds(n, folds, seed)?;
    let seeds: Vec<u64> = (0..n).map(|i| derive_seed(seed, i)).collect();
    let volumes = seeds
        .iter()
        .map(|&s| generate(&template.with_seed(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed,
        template: template.clone(),
        volumes,
        seeds,
        fold_of,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_partition() {
        let f = assign_folds(25, 10, 4).unwrap();
        let mut sizes = vec![0; 10];
        for &k in &f {
            sizes[k] += 1;
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 3, 3, 3, 3, 2, 2, 2, 2, 2]);
        assert!(assign_folds(3, 10, 0).is_err());
    }

    #[test]
    fn manifest_rejects_path_escape() {
        let d = make_dataset(2, &PhantomSpec::desk(16, 0), 1, 2).unwrap();
        let mut m = d.manifest();
        m.volumes[0].file = "../x".into();
        assert!(DatasetManifest::from_json(&m.to_json()).is_err());
        assert!(DatasetManifest::from_json(&d.manifest().to_json()).is_ok());
    }
}
