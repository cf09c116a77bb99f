//! Fusion encoder and modality decoders.

use ndarray::{Array2, Array3};

use super::loss::{structural_loss, token_loss};
use super::ssim::chw_to_hwc;
use super::ReconConfig;
use crate::autodiff::{ConvGeom, Graph, Var};
use crate::data::synth::mix;
use crate::encoders::InputGeometry;
use crate::error::{config, shape, Result};
use crate::modality::Modality;
use crate::nn::{seeded_rng, transformer_stack, BlockShape, ConvTranspose, LayerNorm, Linear, TransformerBlock};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const FUSION_GROUP: &str = "fusion";
pub const DECODER_GROUP: &str = "decoder";

const EMBED_STD: f64 = 0.02;
const UPSAMPLE_STAGES: u32 = 3;

/// Self-attention over two slot-tagged embeddings plus a learned query for
/// the missing slot. No positional encoding is used, so the result does not
/// depend on the order in which the two slots are supplied.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub input: Linear,
    pub slots: ParamId,
    pub query: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    missing: Modality,
    width: usize,
}

impl Fusion {
    fn new(store: &mut ParamStore, init: &mut Init<'_>, d_proj: usize, cfg: &ReconConfig) -> Result<Self> {
        let w = cfg.fusion_width;
        let shape = BlockShape { width: w, heads: cfg.fusion_heads, mlp_ratio: 4 };
        Ok(Self {
            input: Linear::new(store, init, FUSION_GROUP, "input", d_proj, w)?,
            slots: store.insert(FUSION_GROUP, "slots", init.normal(3, w, EMBED_STD))?,
            query: store.insert(FUSION_GROUP, "query", init.normal(1, w, EMBED_STD))?,
            blocks: transformer_stack(store, init, FUSION_GROUP, cfg.fusion_depth, shape)?,
            norm: LayerNorm::new(store, FUSION_GROUP, "final_norm", w)?,
            head: Linear::new(store, init, FUSION_GROUP, "head", w, w)?,
            missing: cfg.missing,
            width: w,
        })
    }

    /// Fused `N × fusion_width` vectors from two `(modality, N × d_proj)` slots.
    pub fn forward(&self, g: &mut Graph<'_>, slots: [(Modality, Var); 2]) -> Result<Var> {
        let [(ma, a), (mb, b)] = slots;
        if ma == mb || ma == self.missing || mb == self.missing {
            return config(format!("fusion for missing {} cannot take {ma} and {mb} as inputs", self.missing));
        }
        let n = g.value(a).rows();
        if g.value(b).rows() != n {
            return shape(format!("slot batches of {n} and {} rows", g.value(b).rows()));
        }
        let pa = self.input.forward(g, a)?;
        let pb = self.input.forward(g, b)?;
        let q = g.param(self.query);
        let mut index = Vec::with_capacity(3 * n);
        for i in 0..n {
            index.extend([(0, i), (1, i), (2, 0)]);
        }
        let tokens = g.gather(&[pa, pb, q], index)?;
        let slot_table = g.param(self.slots);
        let zero = g.input(Matrix::zeros(1, self.width));
        let tags = g.gather(&[slot_table, zero], vec![(0, ma.index()), (0, mb.index()), (1, 0)])?;
        let mut h = g.add_tiled(tokens, tags)?;
        for blk in &self.blocks {
            h = blk.forward(g, h, n, 3, None)?;
        }
        let out: Vec<usize> = (0..n).map(|i| 3 * i + 2).collect();
        let h = g.rows(h, &out)?;
        let h = self.norm.forward(g, h)?;
        self.head.forward(g, h)
    }
}

/// Linear stem to a coarse grid followed by three 2× transposed-convolution
/// stages and a sigmoid; output rows are planar `C × H × W`.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    pub stem: Linear,
    pub stages: Vec<ConvTranspose>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDecoder {
    fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        d_in: usize,
        first_channels: usize,
        out: (usize, usize, usize),
    ) -> Result<Self> {
        let (channels, height, width) = out;
        let f = 1usize << UPSAMPLE_STAGES;
        if height % f != 0 || width % f != 0 {
            return config(format!("decoder output {height}x{width} is not divisible by {f}"));
        }
        let (mut h, mut w, mut c) = (height / f, width / f, first_channels);
        let stem = Linear::new(store, init, DECODER_GROUP, "stem", d_in, c * h * w)?;
        let mut stages = Vec::new();
        for s in 0..UPSAMPLE_STAGES {
            let oc = if s + 1 == UPSAMPLE_STAGES { channels } else { c / 2 };
            let geom =
                ConvGeom { in_channels: c, height: h, width: w, out_channels: oc, kernel: 4, stride: 2, padding: 1 };
            stages.push(ConvTranspose::new(store, init, DECODER_GROUP, &format!("up{s}"), geom)?);
            (h, w, c) = (h * 2, w * 2, oc);
        }
        Ok(Self { stem, stages, channels, height, width })
    }

    fn forward(&self, g: &mut Graph<'_>, fused: Var) -> Result<Var> {
        let mut x = self.stem.forward(g, fused)?;
        x = g.gelu(x);
        for (i, s) in self.stages.iter().enumerate() {
            x = s.forward(g, x)?;
            if i + 1 < self.stages.len() {
                x = g.gelu(x);
            }
        }
        Ok(g.sigmoid(x))
    }
}

/// Per-position token classifier: learned position queries conditioned on
/// the fused vector, one self-attention block, vocabulary scores.
#[derive(Debug, Clone)]
pub struct TextDecoder {
    pub condition: Linear,
    pub position: ParamId,
    pub block: TransformerBlock,
    pub norm: LayerNorm,
    pub out: Linear,
    pub seq: usize,
}

impl TextDecoder {
    fn new(store: &mut ParamStore, init: &mut Init<'_>, cfg: &ReconConfig, seq: usize, vocab: usize) -> Result<Self> {
        let w = cfg.fusion_width;
        let shape = BlockShape { width: w, heads: cfg.fusion_heads, mlp_ratio: 4 };
        Ok(Self {
            condition: Linear::new(store, init, DECODER_GROUP, "condition", w, seq * w)?,
            position: store.insert(DECODER_GROUP, "position", init.normal(seq, w, EMBED_STD))?,
            block: TransformerBlock::new(store, init, DECODER_GROUP, "block", shape)?,
            norm: LayerNorm::new(store, DECODER_GROUP, "final_norm", w)?,
            out: Linear::new(store, init, DECODER_GROUP, "vocab", w, vocab)?,
            seq,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, fused: Var) -> Result<Var> {
        let n = g.value(fused).rows();
        let c = self.condition.forward(g, fused)?;
        let w = g.value(c).cols() / self.seq;
        let c = g.reshape(c, n * self.seq, w)?;
        let pos = g.param(self.position);
        let h = g.add_tiled(c, pos)?;
        let h = self.block.forward(g, h, n, self.seq, None)?;
        let h = self.norm.forward(g, h)?;
        self.out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Image(ConvDecoder),
    Text(TextDecoder),
    Audio(ConvDecoder),
}

/// Decoder output converted to per-sample payloads.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// `H × W × 3` images in [0, 1].
    Images(Vec<Array3<f64>>),
    /// `L × V` score matrices.
    Texts(Vec<Array2<f64>>),
    /// `F × T` spectrograms in [0, 1].
    Spectrograms(Vec<Array2<f64>>),
}

/// Targets for one batch, in the layout the decoder emits.
#[derive(Debug, Clone)]
pub enum Targets<'a> {
    /// Planar `C × H × W` rows.
    Planar(&'a Matrix),
    /// Token ids, `L` per sample.
    Tokens(&'a [Vec<u32>]),
}

#[derive(Debug, Clone)]
pub struct MmrModel {
    pub cfg: ReconConfig,
    pub d_proj: usize,
    pub geometry: InputGeometry,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl MmrModel {
    pub fn new(
        store: &mut ParamStore,
        cfg: ReconConfig,
        d_proj: usize,
        geometry: InputGeometry,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(mix(&[seed, 0x33c, cfg.missing.index() as u64]));
        let mut init = Init::new(&mut rng);
        let fusion = Fusion::new(store, &mut init, d_proj, &cfg)?;
        let w = cfg.fusion_width;
        let decoder = match cfg.missing {
            Modality::Image => Decoder::Image(ConvDecoder::new(
                store,
                &mut init,
                w,
                cfg.decoder_channels,
                (3, geometry.image_size, geometry.image_size),
            )?),
            Modality::Audio => Decoder::Audio(ConvDecoder::new(
                store,
                &mut init,
                w,
                cfg.decoder_channels,
                (1, geometry.mel_bins, geometry.frames),
            )?),
            Modality::Text => {
                Decoder::Text(TextDecoder::new(store, &mut init, &cfg, geometry.max_tokens, geometry.vocab_size)?)
            }
        };
        Ok(Self { cfg, d_proj, geometry, fusion, decoder })
    }

    pub fn missing(&self) -> Modality {
        self.cfg.missing
    }

    pub fn available(&self) -> [Modality; 2] {
        self.cfg.missing.available_when_missing()
    }

    /// Decoder output for the two available embeddings in canonical order.
    pub fn forward(&self, g: &mut Graph<'_>, h_a: Var, h_b: Var) -> Result<Var> {
        let [ma, mb] = self.available();
        let fused = self.fusion.forward(g, [(ma, h_a), (mb, h_b)])?;
        self.decode(g, fused)
    }

    pub fn decode(&self, g: &mut Graph<'_>, fused: Var) -> Result<Var> {
        match &self.decoder {
            Decoder::Image(d) | Decoder::Audio(d) => d.forward(g, fused),
            Decoder::Text(d) => d.forward(g, fused),
        }
    }

    /// Batch-mean reconstruction loss attached to the graph.
    pub fn loss(&self, g: &mut Graph<'_>, out: Var, targets: &Targets<'_>) -> Result<Var> {
        let pred = g.value(out).clone();
        let (value, grad) = match (&self.decoder, targets) {
            (Decoder::Image(d) | Decoder::Audio(d), Targets::Planar(t)) => {
                if t.shape() != pred.shape() {
                    return shape(format!("targets {:?} for decoder output {:?}", t.shape(), pred.shape()));
                }
                let weight = if self.cfg.missing == Modality::Image { self.cfg.delta } else { self.cfg.theta };
                let n = pred.rows();
                let mut grad = Matrix::zeros(n, pred.cols());
                let mut total = 0.0;
                for i in 0..n {
                    let (l, gr) = structural_loss(
                        t.row(i),
                        pred.row(i),
                        (d.channels, d.height, d.width),
                        weight,
                        &self.cfg.ssim,
                        true,
                    )?;
                    total += l;
                    for (o, v) in grad.row_mut(i).iter_mut().zip(gr.expect("requested")) {
                        *o = v / n as f64;
                    }
                }
                (total / n as f64, grad)
            }
            (Decoder::Text(d), Targets::Tokens(t)) => {
                let v = pred.cols();
                if t.len() * d.seq != pred.rows() || t.iter().any(|s| s.len() != d.seq) {
                    return shape(format!("{} token targets for {} decoder rows", t.len(), pred.rows()));
                }
                let n = t.len();
                let mut grad = Matrix::zeros(pred.rows(), v);
                let mut total = 0.0;
                for (i, seq) in t.iter().enumerate() {
                    let rows = i * d.seq * v..(i + 1) * d.seq * v;
                    let (l, gr) = token_loss(seq, &pred.data()[rows.clone()], v, self.cfg.eta, true)?;
                    total += l;
                    for (o, x) in grad.data_mut()[rows].iter_mut().zip(gr.expect("requested")) {
                        *o = x / n as f64;
                    }
                }
                (total / n as f64, grad)
            }
            _ => return config(format!("targets do not match the {} decoder", self.cfg.missing)),
        };
        g.loss(value, &[out], vec![grad])
    }

    /// Splits a decoder output matrix into per-sample payloads.
    pub fn split_output(&self, out: &Matrix) -> Decoded {
        match &self.decoder {
            Decoder::Image(d) => Decoded::Images(
                (0..out.rows()).map(|i| chw_to_hwc(out.row(i), d.channels, d.height, d.width)).collect(),
            ),
            Decoder::Audio(d) => Decoded::Spectrograms(
                (0..out.rows())
                    .map(|i| Array2::from_shape_vec((d.height, d.width), out.row(i).to_vec()).expect("decoder shape"))
                    .collect(),
            ),
            Decoder::Text(d) => {
                let v = out.cols();
                Decoded::Texts(
                    (0..out.rows() / d.seq)
                        .map(|i| {
                            let rows = out.data()[i * d.seq * v..(i + 1) * d.seq * v].to_vec();
                            Array2::from_shape_vec((d.seq, v), rows).expect("decoder shape")
                        })
                        .collect(),
                )
            }
        }
    }

    /// Inference over precomputed embeddings, in chunks.
    pub fn reconstruct(&self, store: &ParamStore, h_a: &Matrix, h_b: &Matrix) -> Result<Matrix> {
        if h_a.shape() != h_b.shape() || h_a.cols() != self.d_proj {
            return shape(format!(
                "available embeddings {:?} and {:?} for d_proj {}",
                h_a.shape(),
                h_b.shape(),
                self.d_proj
            ));
        }
        let mut parts = Vec::new();
        let mut cols = 0;
        let n = h_a.rows();
        for start in (0..n).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
            let mut g = Graph::new(store);
            let a = g.input(h_a.select_rows(&idx));
            let b = g.input(h_b.select_rows(&idx));
            let out = self.forward(&mut g, a, b)?;
            let v = g.value(out);
            cols = v.cols();
            parts.extend_from_slice(v.data());
        }
        Matrix::from_vec(parts.len() / cols.max(1), cols, parts)
    }
}

/// Fused vectors for the two available modalities in canonical order.
pub fn fuse_available(store: &ParamStore, model: &MmrModel, h_a: &Matrix, h_b: &Matrix) -> Result<Matrix> {
    let [ma, mb] = model.available();
    let mut g = Graph::new(store);
    let a = g.input(h_a.clone());
    let b = g.input(h_b.clone());
    let out = model.fusion.forward(&mut g, [(ma, a), (mb, b)])?;
    Ok(g.value(out).clone())
}
