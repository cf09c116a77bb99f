//! Corpus generation and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` plus one binary file per array
//! kind (`images.bin`, `tokens.bin`, `spectrograms.bin`). Each binary file
//! starts with a 16-byte little-endian header:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 0..2  | magic `TM`                              |
//! | 2     | dtype code (1 = f32, 2 = f64, 3 = u32)  |
//! | 3     | rank of one record (1..=3)              |
//! | 4..16 | three `u32` dims, unused ones zero      |
//!
//! followed by the records back to back.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::PromptBank;
use super::synth::{category_name, synthesize_triplet, CategorySpec, SynthConfig, Triplet};
use super::vocab::Vocab;
use crate::error::{config, Error, Result};

pub const ARRAY_MAGIC: [u8; 2] = *b"TM";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U32 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrayHeader {
    pub dtype: DType,
    pub dims: Vec3,
}

/// Record shape; `rank` leading dims are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vec3 {
    pub rank: u8,
    pub dims: [u32; 3],
}

impl Vec3 {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return config(format!("array records must have rank 1..=3, got {}", dims.len()));
        }
        let mut d = [0u32; 3];
        for (o, &v) in d.iter_mut().zip(dims) {
            *o = u32::try_from(v).map_err(|_| Error::Config(format!("dimension {v} too large")))?;
        }
        Ok(Self { rank: dims.len() as u8, dims: d })
    }

    pub fn len(&self) -> usize {
        self.dims[..self.rank as usize].iter().map(|&d| d as usize).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArrayHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..2].copy_from_slice(&ARRAY_MAGIC);
        b[2] = self.dtype as u8;
        b[3] = self.dims.rank;
        for (i, d) in self.dims.dims.iter().enumerate() {
            b[4 + 4 * i..8 + 4 * i].copy_from_slice(&d.to_le_bytes());
        }
        b
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_string(), reason: reason.to_string() };
        if bytes.len() < HEADER_LEN {
            return Err(bad("shorter than the 16-byte header"));
        }
        if bytes[..2] != ARRAY_MAGIC {
            return Err(bad("bad magic"));
        }
        let dtype = DType::from_code(bytes[2]).ok_or_else(|| bad("unknown dtype code"))?;
        let rank = bytes[3];
        if !(1..=3).contains(&rank) {
            return Err(bad("rank outside 1..=3"));
        }
        let mut dims = [0u32; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        }
        Ok(Self { dtype, dims: Vec3 { rank, dims } })
    }

    pub fn record_bytes(&self) -> usize {
        self.dims.len() * self.dtype.size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub category_id: u32,
    /// Index of the sample within its category; keys its perturbations.
    pub sample_index: u64,
    pub split: Split,
    pub caption: String,
    pub image_offset: u64,
    pub tokens_offset: u64,
    pub spectrogram_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_categories: usize,
    pub per_category: usize,
    pub corpus_seed: u64,
    pub synth: SynthConfig,
    /// Train:test parts within each category (7:1 by default).
    pub train_parts: usize,
    pub test_parts: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_categories: 8,
            per_category: 64,
            corpus_seed: 17,
            synth: SynthConfig::default(),
            train_parts: 7,
            test_parts: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return config(format!("at least 2 categories are required, got {}", self.num_categories));
        }
        if self.per_category < 2 {
            return config(format!("at least 2 samples per category are required, got {}", self.per_category));
        }
        if self.train_parts == 0 || self.test_parts == 0 {
            return config("train and test parts must both be positive");
        }
        Ok(())
    }

    /// Test samples per category: the rounded ratio share, kept within `1..per_category`.
    pub fn test_per_category(&self) -> usize {
        let share = self.per_category as f64 * self.test_parts as f64 / (self.train_parts + self.test_parts) as f64;
        (share.round() as usize).clamp(1, self.per_category - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub corpus: CorpusConfig,
    pub categories: Vec<CategorySpec>,
    pub templates: PromptBank,
    /// Held-out templates for zero-shot prototypes (never used for captions).
    pub held_out_templates: PromptBank,
    pub vocab: Vocab,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn corpus_seed(&self) -> u64 {
        self.corpus.corpus_seed
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.index).collect()
    }
}

/// Manifest plus every triplet in sample-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub triplets: Vec<Triplet>,
}

pub fn build_vocab(categories: &[CategorySpec], banks: &[&PromptBank]) -> Vocab {
    Vocab::from_words(
        categories.iter().flat_map(|c| c.name.split_whitespace()).chain(banks.iter().flat_map(|b| b.words())),
    )
}

/// Generates the full corpus in memory. Samples are synthesized in parallel;
/// each is a pure function of its keys, so the result is independent of
/// scheduling.
pub fn generate_dataset(cfg: &CorpusConfig, bank: &PromptBank, held_out: &PromptBank) -> Result<Dataset> {
    cfg.validate()?;
    bank.validate()?;
    held_out.validate()?;
    let categories: Vec<CategorySpec> = (0..cfg.num_categories as u32)
        .map(|id| CategorySpec::derive(id, &category_name(id), cfg.corpus_seed))
        .collect();
    let vocab = build_vocab(&categories, &[bank, held_out]);
    let test_n = cfg.test_per_category();
    let keys: Vec<(usize, u64)> =
        (0..cfg.num_categories).flat_map(|c| (0..cfg.per_category as u64).map(move |i| (c, i))).collect();
    let triplets = keys
        .par_iter()
        .map(|&(c, i)| synthesize_triplet(&categories[c], i, cfg.corpus_seed, bank, &vocab, &cfg.synth))
        .collect::<Result<Vec<_>>>()?;

    let s = &cfg.synth;
    let (img_b, tok_b, spec_b) =
        ((s.image_size * s.image_size * 3 * 4) as u64, (s.max_tokens * 4) as u64, (s.mel_bins * s.frames * 4) as u64);
    let samples = keys
        .iter()
        .zip(&triplets)
        .enumerate()
        .map(|(index, (&(_, i), t))| SampleEntry {
            index,
            category_id: t.category_id,
            sample_index: i,
            split: if i as usize >= cfg.per_category - test_n { Split::Test } else { Split::Train },
            caption: t.caption.clone(),
            image_offset: HEADER_LEN as u64 + index as u64 * img_b,
            tokens_offset: HEADER_LEN as u64 + index as u64 * tok_b,
            spectrogram_offset: HEADER_LEN as u64 + index as u64 * spec_b,
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: 1,
        corpus: cfg.clone(),
        categories,
        templates: bank.clone(),
        held_out_templates: held_out.clone(),
        vocab,
        samples,
    };
    Ok(Dataset { manifest, triplets })
}

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.bin";
const TOKENS: &str = "tokens.bin";
const SPECTROGRAMS: &str = "spectrograms.bin";

impl Dataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }

    pub fn num_categories(&self) -> usize {
        self.manifest.categories.len()
    }

    fn image_header(&self) -> Result<ArrayHeader> {
        let s = &self.manifest.corpus.synth;
        Ok(ArrayHeader { dtype: DType::F32, dims: Vec3::new(&[s.image_size, s.image_size, 3])? })
    }

    fn token_header(&self) -> Result<ArrayHeader> {
        Ok(ArrayHeader { dtype: DType::U32, dims: Vec3::new(&[self.manifest.corpus.synth.max_tokens])? })
    }

    fn spectrogram_header(&self) -> Result<ArrayHeader> {
        let s = &self.manifest.corpus.synth;
        Ok(ArrayHeader { dtype: DType::F32, dims: Vec3::new(&[s.mel_bins, s.frames])? })
    }

    fn image_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.image_header()?.encode().to_vec();
        for t in &self.triplets {
            out.extend(t.image.iter().flat_map(|v| v.to_le_bytes()));
        }
        Ok(out)
    }

    fn token_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.token_header()?.encode().to_vec();
        for t in &self.triplets {
            out.extend(t.tokens.iter().flat_map(|v| v.to_le_bytes()));
        }
        Ok(out)
    }

    fn spectrogram_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.spectrogram_header()?.encode().to_vec();
        for t in &self.triplets {
            out.extend(t.spectrogram.iter().flat_map(|v| v.to_le_bytes()));
        }
        Ok(out)
    }

    /// SHA-256 over the manifest and every stored array byte.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest)?);
        h.update(self.image_bytes()?);
        h.update(self.token_bytes()?);
        h.update(self.spectrogram_bytes()?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let put = |name: &str, bytes: &[u8]| -> Result<()> {
            let mut f = BufWriter::new(fs::File::create(dir.join(name))?);
            f.write_all(bytes)?;
            f.flush()?;
            Ok(())
        };
        put(IMAGES, &self.image_bytes()?)?;
        put(TOKENS, &self.token_bytes()?)?;
        put(SPECTROGRAMS, &self.spectrogram_bytes()?)?;
        put(MANIFEST, &serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        if !mpath.is_file() {
            return Err(Error::Path(format!("no dataset manifest at {}", mpath.display())));
        }
        let mut manifest: DatasetManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
        manifest.vocab = manifest.vocab.reindexed();
        let n = manifest.samples.len();
        let s = manifest.corpus.synth;

        let load = |name: &str, expect: ArrayHeader| -> Result<Vec<u8>> {
            let path = dir.join(name);
            let p = path.display().to_string();
            let bytes = fs::read(&path)?;
            let header = ArrayHeader::decode(&bytes, &p)?;
            if header != expect {
                return Err(Error::Format { path: p, reason: format!("header {header:?}, expected {expect:?}") });
            }
            if bytes.len() != HEADER_LEN + n * header.record_bytes() {
                return Err(Error::Format {
                    path: p,
                    reason: format!("{} bytes for {n} records of {} bytes", bytes.len(), header.record_bytes()),
                });
            }
            Ok(bytes)
        };
        let img_h = ArrayHeader { dtype: DType::F32, dims: Vec3::new(&[s.image_size, s.image_size, 3])? };
        let tok_h = ArrayHeader { dtype: DType::U32, dims: Vec3::new(&[s.max_tokens])? };
        let spec_h = ArrayHeader { dtype: DType::F32, dims: Vec3::new(&[s.mel_bins, s.frames])? };
        let images = load(IMAGES, img_h)?;
        let tokens = load(TOKENS, tok_h)?;
        let specs = load(SPECTROGRAMS, spec_h)?;

        let f32s = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
        };
        let mut triplets = Vec::with_capacity(n);
        for e in &manifest.samples {
            let io = e.image_offset as usize;
            let to = e.tokens_offset as usize;
            let so = e.spectrogram_offset as usize;
            let slice = |buf: &[u8], off: usize, len: usize, name: &str| -> Result<Vec<u8>> {
                buf.get(off..off + len).map(<[u8]>::to_vec).ok_or_else(|| Error::Format {
                    path: name.to_string(),
                    reason: format!("sample {} offset {off} out of bounds", e.index),
                })
            };
            let image = Array3::from_shape_vec(
                (s.image_size, s.image_size, 3),
                f32s(&slice(&images, io, img_h.record_bytes(), IMAGES)?),
            )
            .map_err(|err| Error::Shape(err.to_string()))?;
            let toks = slice(&tokens, to, tok_h.record_bytes(), TOKENS)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let spectrogram = Array2::from_shape_vec(
                (s.mel_bins, s.frames),
                f32s(&slice(&specs, so, spec_h.record_bytes(), SPECTROGRAMS)?),
            )
            .map_err(|err| Error::Shape(err.to_string()))?;
            triplets.push(Triplet {
                image,
                tokens: toks,
                spectrogram,
                category_id: e.category_id,
                caption: e.caption.clone(),
            });
        }
        Ok(Self { manifest, triplets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let cfg = CorpusConfig { num_categories: 2, per_category: 2, corpus_seed: 1, ..Default::default() };
        generate_dataset(&cfg, &PromptBank::training_default(), &PromptBank::evaluation_default()).unwrap()
    }

    #[test]
    fn minimum_corpus_has_disjoint_splits() {
        let d = small();
        assert_eq!(d.len(), 4);
        let train = d.indices(Split::Train);
        let test = d.indices(Split::Test);
        assert_eq!(train.len() + test.len(), 4);
        assert!(train.iter().all(|i| !test.contains(i)));
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn default_split_is_seven_to_one() {
        let cfg = CorpusConfig::default();
        assert_eq!(cfg.test_per_category(), 8);
        assert_eq!(cfg.num_categories * (cfg.per_category - cfg.test_per_category()), 448);
    }

    #[test]
    fn validation_rejects_tiny_corpora() {
        let cfg = CorpusConfig { num_categories: 1, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = CorpusConfig { per_category: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn header_round_trip_and_corruption() {
        let h = ArrayHeader { dtype: DType::F32, dims: Vec3::new(&[64, 64, 3]).unwrap() };
        assert_eq!(ArrayHeader::decode(&h.encode(), "x").unwrap(), h);
        let mut b = h.encode();
        b[0] = b'X';
        assert!(ArrayHeader::decode(&b, "x").is_err());
        assert!(ArrayHeader::decode(&b[..8], "x").is_err());
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.digest().unwrap(), d.digest().unwrap());
    }

    #[test]
    fn truncated_array_file_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let p = dir.path().join(IMAGES);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(Error::Format { .. })));
    }
}
