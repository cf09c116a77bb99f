//! Run configuration tree, its digest, and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignmentConfig;
use crate::data::{AugmentPolicy, CorpusConfig};
use crate::encoders::EncoderSpecs;
use crate::error::{Error, Result};
use crate::mmr::ReconConfig;
use crate::optim::OptimizerConfig;

pub const PRETRAIN_SEED: u64 = 17;
pub const MMR_SEED: u64 = 42;
pub const EVAL_SEEDS: [u64; 3] = [17, 42, 77];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    pub pretrain: u64,
    pub mmr: u64,
    pub eval: Vec<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { pretrain: PRETRAIN_SEED, mmr: MMR_SEED, eval: EVAL_SEEDS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), out_dir: PathBuf::from("runs") }
    }
}

/// Everything that determines a run. Any field left out of a config file
/// takes its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: CorpusConfig,
    pub encoders: EncoderSpecs,
    pub alignment: AlignmentConfig,
    pub recon: ReconConfig,
    pub pretrain_optimizer: OptimizerConfig,
    pub mmr_optimizer: OptimizerConfig,
    pub augment: AugmentPolicy,
    pub seeds: SeedConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: CorpusConfig::default(),
            encoders: EncoderSpecs::desk_default(PRETRAIN_SEED),
            alignment: AlignmentConfig::default(),
            recon: ReconConfig::default(),
            pretrain_optimizer: OptimizerConfig::desk_pretrain(),
            mmr_optimizer: OptimizerConfig::mmr(),
            augment: AugmentPolicy::default(),
            seeds: SeedConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Path(format!("cannot read config {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn digest(&self) -> Result<String> {
        digest_json(self)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            encoders: self.encoders.with_seed(self.seeds.pretrain),
            alignment: self.alignment,
            optimizer: self.pretrain_optimizer,
            augment: self.augment.clone(),
            seed: self.seeds.pretrain,
        }
    }
}

/// Inputs of one pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub encoders: EncoderSpecs,
    pub alignment: AlignmentConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl PretrainConfig {
    /// Desk profile: default encoders initialized from `seed`.
    pub fn desk(seed: u64) -> Self {
        Self {
            encoders: EncoderSpecs::desk_default(seed),
            alignment: AlignmentConfig::default(),
            optimizer: OptimizerConfig::desk_pretrain(),
            augment: AugmentPolicy::default(),
            seed,
        }
    }
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn digest_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_takes_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"alignment": {"alpha": 0.5}}"#).unwrap();
        assert_eq!(c.alignment.alpha, 0.5);
        assert_eq!(c.alignment.tau, 0.07);
        assert_eq!(c.seeds.eval, vec![17, 42, 77]);
        assert_ne!(c.digest().unwrap(), RunConfig::default().digest().unwrap());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
    }
}
