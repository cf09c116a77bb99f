//! Per-modality transformer encoders with a shared projection width.
//!
//! Images are cut into square patches and spectrograms into full-height
//! strips of consecutive frames. Both prepend a pooling slot whose content is
//! purely learned (a zero input row plus its positional embedding); the
//! pooled feature is that slot's output. Text is embedded token by token and
//! mean-pooled over non-pad positions. Every branch ends in a linear
//! projection followed by L2 normalization.

use ndarray::{ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::synth::mix;
use crate::data::{SynthConfig, PAD};
use crate::error::{config, shape, Error, Result};
use crate::modality::Modality;
use crate::nn::{seeded_rng, transformer_stack, BlockShape, LayerNorm, Linear, TransformerBlock};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Matrix;

const EMBED_STD: f64 = 0.02;
const INFERENCE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modality: Modality,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub d_proj: usize,
    pub parameter_seed: u64,
    /// Patch side for images, strip width in frames for audio; unused for text.
    pub patch: usize,
}

impl EncoderSpec {
    pub fn desk_default(modality: Modality, parameter_seed: u64) -> Self {
        Self {
            modality,
            depth: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            d_proj: 64,
            parameter_seed,
            patch: match modality {
                Modality::Image => 16,
                Modality::Audio => 4,
                Modality::Text => 0,
            },
        }
    }

    fn block_shape(&self) -> BlockShape {
        BlockShape { width: self.width, heads: self.heads, mlp_ratio: self.mlp_ratio }
    }

    pub fn group(&self) -> &'static str {
        encoder_group(self.modality)
    }
}

pub fn encoder_group(m: Modality) -> &'static str {
    match m {
        Modality::Image => "image_encoder",
        Modality::Text => "text_encoder",
        Modality::Audio => "audio_encoder",
    }
}

pub const ENCODER_GROUPS: [&str; 3] = ["image_encoder", "text_encoder", "audio_encoder"];

/// Specs for all three branches, in image, text, audio order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpecs {
    pub image: EncoderSpec,
    pub text: EncoderSpec,
    pub audio: EncoderSpec,
}

impl EncoderSpecs {
    pub fn desk_default(parameter_seed: u64) -> Self {
        Self {
            image: EncoderSpec::desk_default(Modality::Image, parameter_seed),
            text: EncoderSpec::desk_default(Modality::Text, parameter_seed),
            audio: EncoderSpec::desk_default(Modality::Audio, parameter_seed),
        }
    }

    pub fn with_seed(mut self, parameter_seed: u64) -> Self {
        self.image.parameter_seed = parameter_seed;
        self.text.parameter_seed = parameter_seed;
        self.audio.parameter_seed = parameter_seed;
        self
    }

    pub fn get(&self, m: Modality) -> &EncoderSpec {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
        }
    }

    pub fn d_proj(&self) -> usize {
        self.image.d_proj
    }

    pub fn validate(&self, geom: &InputGeometry) -> Result<()> {
        for m in Modality::ALL {
            let s = self.get(m);
            if s.modality != m {
                return config(format!("{m} slot holds a {} spec", s.modality));
            }
            if s.depth == 0 || s.width == 0 || s.d_proj == 0 || s.mlp_ratio == 0 {
                return config(format!("{m} encoder dimensions must be positive"));
            }
            if s.heads == 0 || !s.width.is_multiple_of(s.heads) {
                return config(format!("{m} encoder width {} is not divisible by {} heads", s.width, s.heads));
            }
            if s.d_proj != self.image.d_proj {
                return config(format!(
                    "projection width differs across modalities ({} vs {})",
                    s.d_proj, self.image.d_proj
                ));
            }
        }
        let p = self.image.patch;
        if p == 0 || !geom.image_size.is_multiple_of(p) {
            return config(format!("image size {} is not divisible into {p}-pixel patches", geom.image_size));
        }
        let q = self.audio.patch;
        if q == 0 || !geom.frames.is_multiple_of(q) {
            return config(format!("{} frames are not divisible into {q}-frame strips", geom.frames));
        }
        if geom.vocab_size < 3 || geom.max_tokens == 0 {
            return config("text encoder needs a vocabulary beyond the special tokens and a positive length");
        }
        Ok(())
    }
}

/// Input dimensions the encoders are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub image_size: usize,
    pub mel_bins: usize,
    pub frames: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
}

impl InputGeometry {
    pub fn new(synth: &SynthConfig, vocab_size: usize) -> Self {
        Self {
            image_size: synth.image_size,
            mel_bins: synth.mel_bins,
            frames: synth.frames,
            max_tokens: synth.max_tokens,
            vocab_size,
        }
    }
}

/// Transformer trunk shared by all three branches.
#[derive(Debug, Clone)]
struct Trunk {
    position: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    project: Linear,
}

impl Trunk {
    fn new(store: &mut ParamStore, init: &mut Init<'_>, spec: &EncoderSpec, seq: usize) -> Result<Self> {
        let group = spec.group();
        let position = store.insert(group, "position", init.normal(seq, spec.width, EMBED_STD))?;
        let blocks = transformer_stack(store, init, group, spec.depth, spec.block_shape())?;
        let norm = LayerNorm::new(store, group, "final_norm", spec.width)?;
        let project = Linear::new(store, init, group, "projection", spec.width, spec.d_proj)?;
        Ok(Self { position, blocks, norm, project })
    }

    fn run(&self, g: &mut Graph<'_>, x: Var, batch: usize, seq: usize, mask: Option<&[bool]>) -> Result<Var> {
        let pos = g.param(self.position);
        let mut h = g.add_tiled(x, pos)?;
        for b in &self.blocks {
            h = b.forward(g, h, batch, seq, mask)?;
        }
        self.norm.forward(g, h)
    }

    fn head(&self, g: &mut Graph<'_>, pooled: Var) -> Result<Var> {
        let z = self.project.forward(g, pooled)?;
        Ok(g.l2_normalize(z))
    }
}

#[derive(Debug, Clone)]
struct PatchEncoder {
    embed: Linear,
    trunk: Trunk,
    seq: usize,
}

impl PatchEncoder {
    fn forward(&self, g: &mut Graph<'_>, patches: Matrix, batch: usize) -> Result<Var> {
        let x = g.input(patches);
        let x = self.embed.forward(g, x)?;
        let h = self.trunk.run(g, x, batch, self.seq, None)?;
        let pool: Vec<usize> = (0..batch).map(|b| b * self.seq).collect();
        let pooled = g.rows(h, &pool)?;
        self.trunk.head(g, pooled)
    }
}

#[derive(Debug, Clone)]
struct TextEncoder {
    embed: ParamId,
    trunk: Trunk,
    seq: usize,
}

impl TextEncoder {
    fn forward(&self, g: &mut Graph<'_>, tokens: &[&[u32]]) -> Result<Var> {
        let batch = tokens.len();
        let table = g.param(self.embed);
        let vocab = g.value(table).rows();
        let mut index = Vec::with_capacity(batch * self.seq);
        let mut mask = Vec::with_capacity(batch * self.seq);
        for (b, seq) in tokens.iter().enumerate() {
            if seq.len() != self.seq {
                return shape(format!("token sequence {b} has length {}, expected {}", seq.len(), self.seq));
            }
            if seq.iter().all(|&t| t == PAD) {
                return config(format!("token sequence {b} is all padding; nothing to pool"));
            }
            for &t in seq.iter() {
                if t as usize >= vocab {
                    return Err(Error::Range(format!("token id {t} outside a vocabulary of {vocab}")));
                }
                index.push((0, t as usize));
                mask.push(t != PAD);
            }
        }
        let x = g.gather(&[table], index)?;
        let h = self.trunk.run(g, x, batch, self.seq, Some(&mask))?;
        let pooled = g.masked_mean(h, self.seq, &mask)?;
        self.trunk.head(g, pooled)
    }
}

/// The three modality branches. Parameters live in a caller-owned store
/// under the groups of [`ENCODER_GROUPS`].
#[derive(Debug, Clone)]
pub struct TriModalEncoders {
    specs: EncoderSpecs,
    geometry: InputGeometry,
    image: PatchEncoder,
    text: TextEncoder,
    audio: PatchEncoder,
}

impl TriModalEncoders {
    pub fn new(store: &mut ParamStore, specs: EncoderSpecs, geometry: InputGeometry) -> Result<Self> {
        specs.validate(&geometry)?;

        let s = &specs.image;
        let mut rng = seeded_rng(mix(&[s.parameter_seed, 0x1a9e, 0]));
        let mut init = Init::new(&mut rng);
        let p = s.patch;
        let image_seq = (geometry.image_size / p).pow(2) + 1;
        let image = PatchEncoder {
            embed: Linear::new(store, &mut init, s.group(), "patch_embed", p * p * 3, s.width)?,
            trunk: Trunk::new(store, &mut init, s, image_seq)?,
            seq: image_seq,
        };

        let s = &specs.text;
        let mut rng = seeded_rng(mix(&[s.parameter_seed, 0x1a9e, 1]));
        let mut init = Init::new(&mut rng);
        let text = TextEncoder {
            embed: store.insert(s.group(), "token_embed", init.normal(geometry.vocab_size, s.width, EMBED_STD))?,
            trunk: Trunk::new(store, &mut init, s, geometry.max_tokens)?,
            seq: geometry.max_tokens,
        };

        let s = &specs.audio;
        let mut rng = seeded_rng(mix(&[s.parameter_seed, 0x1a9e, 2]));
        let mut init = Init::new(&mut rng);
        let audio_seq = geometry.frames / s.patch + 1;
        let audio = PatchEncoder {
            embed: Linear::new(store, &mut init, s.group(), "patch_embed", geometry.mel_bins * s.patch, s.width)?,
            trunk: Trunk::new(store, &mut init, s, audio_seq)?,
            seq: audio_seq,
        };
        Ok(Self { specs, geometry, image, text, audio })
    }

    pub fn specs(&self) -> &EncoderSpecs {
        &self.specs
    }

    pub fn geometry(&self) -> &InputGeometry {
        &self.geometry
    }

    pub fn d_proj(&self) -> usize {
        self.specs.d_proj()
    }

    /// Patch rows for a batch of `H × W × 3` images; row 0 of each sequence
    /// is the zero pooling slot.
    pub fn image_patches(&self, images: &[ArrayView3<'_, f32>]) -> Result<Matrix> {
        let size = self.geometry.image_size;
        let p = self.specs.image.patch;
        let per_side = size / p;
        let seq = self.image.seq;
        let cols = p * p * 3;
        let mut out = Matrix::zeros(images.len() * seq, cols);
        for (b, img) in images.iter().enumerate() {
            if img.shape() != [size, size, 3] {
                return shape(format!("image {b} has shape {:?}, expected [{size}, {size}, 3]", img.shape()));
            }
            for py in 0..per_side {
                for px in 0..per_side {
                    let row = out.row_mut(b * seq + 1 + py * per_side + px);
                    let mut k = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for c in 0..3 {
                                row[k] = f64::from(img[[py * p + dy, px * p + dx, c]]) - 0.5;
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Strip rows for a batch of `F × T` spectrograms, pooling slot first.
    pub fn audio_patches(&self, specs: &[ArrayView2<'_, f32>]) -> Result<Matrix> {
        let (f, t) = (self.geometry.mel_bins, self.geometry.frames);
        let q = self.specs.audio.patch;
        let seq = self.audio.seq;
        let mut out = Matrix::zeros(specs.len() * seq, f * q);
        for (b, s) in specs.iter().enumerate() {
            if s.shape() != [f, t] {
                return shape(format!("spectrogram {b} has shape {:?}, expected [{f}, {t}]", s.shape()));
            }
            for strip in 0..t / q {
                let row = out.row_mut(b * seq + 1 + strip);
                for m in 0..f {
                    for dt in 0..q {
                        row[m * q + dt] = f64::from(s[[m, strip * q + dt]]) - 0.5;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn image_graph(&self, g: &mut Graph<'_>, images: &[ArrayView3<'_, f32>]) -> Result<Var> {
        let x = self.image_patches(images)?;
        self.image.forward(g, x, images.len())
    }

    pub fn text_graph(&self, g: &mut Graph<'_>, tokens: &[&[u32]]) -> Result<Var> {
        self.text.forward(g, tokens)
    }

    pub fn audio_graph(&self, g: &mut Graph<'_>, specs: &[ArrayView2<'_, f32>]) -> Result<Var> {
        let x = self.audio_patches(specs)?;
        self.audio.forward(g, x, specs.len())
    }

    pub fn encode_image(&self, store: &ParamStore, images: &[ArrayView3<'_, f32>]) -> Result<Matrix> {
        self.chunked(images, |g, chunk| self.image_graph(g, chunk), store)
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &[&[u32]]) -> Result<Matrix> {
        self.chunked(tokens, |g, chunk| self.text_graph(g, chunk), store)
    }

    pub fn encode_audio(&self, store: &ParamStore, specs: &[ArrayView2<'_, f32>]) -> Result<Matrix> {
        self.chunked(specs, |g, chunk| self.audio_graph(g, chunk), store)
    }

    fn chunked<T>(
        &self,
        items: &[T],
        f: impl Fn(&mut Graph<'_>, &[T]) -> Result<Var>,
        store: &ParamStore,
    ) -> Result<Matrix> {
        let d = self.d_proj();
        let mut data = Vec::with_capacity(items.len() * d);
        for chunk in items.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::with_frozen(store, &ENCODER_GROUPS);
            let out = f(&mut g, chunk)?;
            let v = g.value(out);
            if !v.is_finite() {
                return Err(Error::Numeric("encoder produced non-finite embeddings".into()));
            }
            data.extend_from_slice(v.data());
        }
        Matrix::from_vec(items.len(), d, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn small_geom() -> InputGeometry {
        InputGeometry { image_size: 8, mel_bins: 8, frames: 8, max_tokens: 6, vocab_size: 10 }
    }

    fn small_specs(seed: u64) -> EncoderSpecs {
        let mut s = EncoderSpecs::desk_default(seed);
        for spec in [&mut s.image, &mut s.text, &mut s.audio] {
            spec.width = 8;
            spec.heads = 2;
            spec.mlp_ratio = 2;
            spec.d_proj = 4;
            spec.depth = 1;
        }
        s.image.patch = 4;
        s.audio.patch = 2;
        s
    }

    #[test]
    fn rejects_mismatched_projection_width() {
        let mut s = small_specs(1);
        s.audio.d_proj = 5;
        let mut store = ParamStore::new();
        assert!(matches!(TriModalEncoders::new(&mut store, s, small_geom()), Err(Error::Config(_))));
    }

    #[test]
    fn unit_norm_outputs_and_shape_errors() {
        let mut store = ParamStore::new();
        let enc = TriModalEncoders::new(&mut store, small_specs(3), small_geom()).unwrap();
        let img = Array3::<f32>::from_elem((8, 8, 3), 0.3);
        let e = enc.encode_image(&store, &[img.view()]).unwrap();
        assert_eq!(e.shape(), (1, 4));
        assert!((e.row_norms()[0] - 1.0).abs() < 1e-12);
        let bad = Array3::<f32>::zeros((8, 4, 3));
        assert!(matches!(enc.encode_image(&store, &[bad.view()]), Err(Error::Shape(_))));
        let spec = Array2::<f32>::zeros((8, 8));
        let a = enc.encode_audio(&store, &[spec.view()]).unwrap();
        assert!(a.is_finite());
        assert!((a.row_norms()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_pad_text_is_rejected() {
        let mut store = ParamStore::new();
        let enc = TriModalEncoders::new(&mut store, small_specs(3), small_geom()).unwrap();
        let pads = [0u32; 6];
        assert!(enc.encode_text(&store, &[&pads]).is_err());
        let oov = [1u32, 99, 0, 0, 0, 0];
        assert!(matches!(enc.encode_text(&store, &[&oov]), Err(Error::Range(_))));
    }
}
