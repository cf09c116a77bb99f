//! Checkpoint container: `TMCK` magic, `u32` version, `u64` header length,
//! a JSON header, then one array block per parameter in the dataset array
//! format (16-byte header, little-endian `f64` payload).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::history::LossHistory;
use crate::alignment::AlignmentConfig;
use crate::data::store::{ArrayHeader, DType, Vec3, HEADER_LEN};
use crate::encoders::{EncoderSpecs, InputGeometry, TriModalEncoders, ENCODER_GROUPS};
use crate::error::{config, Error, Result};
use crate::mmr::{MmrModel, ReconConfig, DECODER_GROUP, FUSION_GROUP};
use crate::optim::OptimizerConfig;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ALIGNMENT_GROUP: &str = "alignment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Mmr,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Mmr => "mmr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub group: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub stage: Stage,
    pub encoders: EncoderSpecs,
    pub geometry: InputGeometry,
    pub alignment: AlignmentConfig,
    pub recon: Option<ReconConfig>,
    pub optimizer: OptimizerConfig,
    pub corpus_digest: String,
    pub seed: u64,
    /// Checksum of the encoder groups held in this bundle.
    pub encoder_checksum: String,
    /// For reconstruction bundles, the encoder checksum of the pre-training
    /// bundle they were trained from.
    pub pretrain_encoder_checksum: Option<String>,
    pub config_digest: String,
    pub history: LossHistory,
    pub parameters: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub header: BundleHeader,
    pub params: ParamStore,
}

impl CheckpointBundle {
    pub fn new(mut header: BundleHeader, params: ParamStore) -> Self {
        header.parameters = params
            .entries()
            .iter()
            .map(|e| ParamRecord {
                group: e.group.clone(),
                name: local_name(&e.name, &e.group).to_string(),
                rows: e.value.rows(),
                cols: e.value.cols(),
            })
            .collect();
        Self { header, params }
    }

    pub fn stage(&self) -> Stage {
        self.header.stage
    }

    pub fn encoder_checksum(&self) -> String {
        self.params.checksum(Some(&ENCODER_GROUPS))
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.header.stage != stage {
            return config(format!("expected a {stage} checkpoint, got a {} checkpoint", self.header.stage));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.params.entries() {
            let h = ArrayHeader { dtype: DType::F64, dims: Vec3::new(&[e.value.rows(), e.value.cols()])? };
            out.extend_from_slice(&h.encode());
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_string(), reason };
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hbytes = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: BundleHeader = serde_json::from_slice(hbytes)?;
        let mut params = ParamStore::new();
        let mut off = 16 + hlen;
        for rec in &header.parameters {
            let h = ArrayHeader::decode(bytes.get(off..).unwrap_or(&[]), path)?;
            if h.dtype != DType::F64 || h.dims.rank != 2 || h.dims.dims[..2] != [rec.rows as u32, rec.cols as u32] {
                return Err(bad(format!("block for {}.{} has header {h:?}", rec.group, rec.name)));
            }
            off += HEADER_LEN;
            let n = rec.rows * rec.cols;
            let payload = bytes.get(off..off + 8 * n).ok_or_else(|| bad(format!("truncated block {}", rec.name)))?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(&rec.group, &rec.name, Matrix::from_vec(rec.rows, rec.cols, data)?)?;
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::config::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Path(format!("no checkpoint at {}", path.display())));
        }
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }

    /// Rebuilds the encoders and loads their parameters from this bundle.
    pub fn restore_encoders(&self) -> Result<(ParamStore, TriModalEncoders)> {
        let mut store = ParamStore::new();
        let enc = TriModalEncoders::new(&mut store, self.header.encoders, self.header.geometry)?;
        store.assign_from(&self.params, &ENCODER_GROUPS)?;
        Ok((store, enc))
    }

    /// Rebuilds encoders plus the fusion and decoder of a reconstruction bundle.
    pub fn restore_mmr(&self) -> Result<(ParamStore, TriModalEncoders, MmrModel)> {
        self.require_stage(Stage::Mmr)?;
        let recon =
            self.header.recon.ok_or_else(|| Error::Config("checkpoint lacks its reconstruction config".into()))?;
        let (mut store, enc) = self.restore_encoders()?;
        let model = MmrModel::new(&mut store, recon, enc.d_proj(), self.header.geometry, self.header.seed)?;
        store.assign_from(&self.params, &[FUSION_GROUP, DECODER_GROUP])?;
        Ok((store, enc, model))
    }

    /// Temperature in effect at the end of training.
    pub fn tau(&self) -> f64 {
        self.params
            .id(&format!("{ALIGNMENT_GROUP}.log_tau"))
            .map_or(self.header.alignment.tau, |id| self.params.get(id).data()[0].exp())
    }
}

fn local_name<'a>(full: &'a str, group: &str) -> &'a str {
    full.strip_prefix(group).and_then(|s| s.strip_prefix('.')).unwrap_or(full)
}
