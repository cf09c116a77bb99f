//! Parametric tri-modal corpus: each category owns an image prototype (soft
//! colored blobs) and a spectrogram prototype (a decaying harmonic stack).
//! A sample perturbs both prototypes with a latent it shares across
//! modalities: a horizontal blob offset that doubles as a time offset, a
//! common gain, and a variant code tied to the caption template (a background
//! tint in the image, a pair of high-band levels in the spectrogram).

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::prompt::PromptBank;
use super::vocab::{Vocab, DEFAULT_MAX_LEN};
use crate::error::{config, Result};

const CATEGORY_NAMES: [&str; 24] = [
    "dog barking",
    "cat meowing",
    "bird chirping",
    "car engine",
    "church bell",
    "rain falling",
    "ocean waves",
    "people clapping",
    "train horn",
    "thunder storm",
    "violin playing",
    "baby crying",
    "fire crackling",
    "helicopter flying",
    "rooster crowing",
    "door knocking",
    "piano playing",
    "frog croaking",
    "siren wailing",
    "wind blowing",
    "horse galloping",
    "clock ticking",
    "drum beating",
    "cow mooing",
];

pub fn category_name(id: u32) -> String {
    CATEGORY_NAMES.get(id as usize).map(|s| s.to_string()).unwrap_or_else(|| format!("sound source {id}"))
}

/// Array sizes and perturbation strength of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub mel_bins: usize,
    pub frames: usize,
    pub max_tokens: usize,
    /// Scales every per-sample perturbation; 0 reproduces the prototypes.
    pub jitter: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { image_size: 64, mel_bins: 64, frames: 64, max_tokens: DEFAULT_MAX_LEN, jitter: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center_y: f32,
    pub center_x: f32,
    pub radius: f32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrototype {
    pub background: [f32; 3],
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioPrototype {
    /// Fundamental position as a fraction of the mel axis.
    pub fundamental: f32,
    pub harmonics: u32,
    /// Onset and decay as fractions of the frame axis.
    pub onset: f32,
    pub decay: f32,
    pub bandwidth: f32,
    pub modulation: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category_id: u32,
    pub name: String,
    pub image: ImagePrototype,
    pub audio: AudioPrototype,
}

/// SplitMix64 finalizer used to derive independent stream seeds.
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl CategorySpec {
    /// Prototype parameters are a pure function of `(category_id, corpus_seed)`.
    pub fn derive(category_id: u32, name: &str, corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[corpus_seed, 0xCA7E, category_id as u64]));
        let color = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| {
            [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
        };
        let background = color(&mut rng, 0.05, 0.35);
        let main = Blob {
            center_y: rng.random_range(0.35..0.75),
            center_x: rng.random_range(0.3..0.7),
            radius: rng.random_range(0.1..0.2),
            color: color(&mut rng, 0.3, 1.0),
        };
        let second = Blob {
            center_y: rng.random_range(0.2..0.85),
            center_x: rng.random_range(0.15..0.85),
            radius: rng.random_range(0.06..0.12),
            color: color(&mut rng, 0.2, 1.0),
        };
        let audio = AudioPrototype {
            fundamental: rng.random_range(0.04..0.2),
            harmonics: rng.random_range(2..6),
            onset: rng.random_range(0.2..0.4),
            decay: rng.random_range(0.15..0.5),
            bandwidth: rng.random_range(0.8..2.0),
            modulation: rng.random_range(0.0..4.0),
        };
        Self {
            category_id,
            name: name.to_string(),
            image: ImagePrototype { background, blobs: vec![main, second] },
            audio,
        }
    }
}

/// One aligned `(image, caption tokens, spectrogram)` sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    /// `H × W × 3`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// Exactly `max_tokens` ids: begin token, words, padding.
    pub tokens: Vec<u32>,
    /// `mel_bins × frames`, values in `[0, 1]`.
    pub spectrogram: Array2<f32>,
    pub category_id: u32,
    pub caption: String,
}

/// Shared per-sample latent.
#[derive(Debug, Clone, Copy)]
struct Latent {
    shift: f32,
    gain: f32,
    variant: usize,
    variants: usize,
}

impl Latent {
    fn code(&self) -> (f32, f32) {
        let theta = std::f32::consts::TAU * self.variant as f32 / self.variants.max(1) as f32;
        (theta.cos(), theta.sin())
    }
}

fn render_image(
    proto: &ImagePrototype,
    size: usize,
    latent: Option<Latent>,
    jitter: f32,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((size, size, 3));
    let mut background = proto.background;
    if let Some(l) = latent {
        let (u, v) = l.code();
        background[0] += 0.12 * jitter * u;
        background[2] += 0.12 * jitter * v;
    }
    for ((_, _, c), v) in img.indexed_iter_mut() {
        *v = background[c];
    }
    let color_noise = Normal::new(0.0f32, 0.05).expect("valid std");
    for (b, blob) in proto.blobs.iter().enumerate() {
        let (mut cx, mut alpha, mut color) = (blob.center_x, 1.0f32, blob.color);
        if let Some(l) = latent {
            if b == 0 {
                cx += l.shift * 0.15 * jitter;
            }
            alpha = 1.0 - jitter * (1.0 - l.gain);
            for c in color.iter_mut() {
                *c = (*c + jitter * color_noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        paint_blob(&mut img, blob.center_y, cx, blob.radius, color, alpha);
    }
    img
}

fn paint_blob(img: &mut Array3<f32>, cy: f32, cx: f32, radius: f32, color: [f32; 3], alpha: f32) {
    let (h, w, _) = img.dim();
    let two_r2 = 2.0 * radius * radius;
    for y in 0..h {
        let fy = (y as f32 + 0.5) / h as f32 - cy;
        for x in 0..w {
            let fx = (x as f32 + 0.5) / w as f32 - cx;
            let a = alpha * (-(fy * fy + fx * fx) / two_r2).exp();
            for c in 0..3 {
                let v = &mut img[[y, x, c]];
                *v = *v * (1.0 - a) + color[c] * a;
            }
        }
    }
}

fn render_spectrogram(
    proto: &AudioPrototype,
    mel_bins: usize,
    frames: usize,
    latent: Option<Latent>,
    jitter: f32,
) -> Array2<f32> {
    let mut spec = Array2::<f32>::zeros((mel_bins, frames));
    let (shift, gain) = match latent {
        Some(l) => (l.shift * 0.15 * jitter, 1.0 - jitter * (1.0 - l.gain)),
        None => (0.0, 1.0),
    };
    let onset = (proto.onset + shift) * frames as f32;
    let decay = proto.decay * frames as f32;
    let f = mel_bins as f32;
    for h in 1..=proto.harmonics {
        let center = proto.fundamental * f * (h as f32).powf(0.8);
        if center >= f {
            break;
        }
        let amp = 0.85 / (h as f32).sqrt();
        let bw = proto.bandwidth * (1.0 + 0.25 * h as f32);
        for m in 0..mel_bins {
            let d = m as f32 - center;
            let spectral = amp * (-(d * d) / (2.0 * bw * bw)).exp();
            if spectral < 1e-6 {
                continue;
            }
            for t in 0..frames {
                let dt = t as f32 - onset;
                let env = if dt < 0.0 {
                    (dt / 1.5).exp()
                } else {
                    (-dt / decay).exp()
                        * (0.75 + 0.25 * (std::f32::consts::TAU * proto.modulation * t as f32 / frames as f32).cos())
                };
                spec[[m, t]] += gain * spectral * env;
            }
        }
    }
    if let Some(l) = latent {
        let (u, v) = l.code();
        let lo = mel_bins * 3 / 4;
        let mid = (lo + mel_bins) / 2;
        for m in lo..mel_bins {
            let level = if m < mid { u } else { v };
            for t in 0..frames {
                spec[[m, t]] += 0.15 * jitter * (1.0 + level);
            }
        }
    }
    spec
}

fn add_noise_and_clip<D: ndarray::Dimension>(a: &mut ndarray::Array<f32, D>, std: f32, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        let n = Normal::new(0.0f32, std).expect("valid std");
        a.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    a.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Noise-free class prototypes at the configured sizes.
pub fn prototype_arrays(spec: &CategorySpec, cfg: &SynthConfig) -> (Array3<f32>, Array2<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut img = render_image(&spec.image, cfg.image_size, None, 0.0, &mut rng);
    let mut sp = render_spectrogram(&spec.audio, cfg.mel_bins, cfg.frames, None, 0.0);
    add_noise_and_clip(&mut img, 0.0, &mut rng);
    add_noise_and_clip(&mut sp, 0.0, &mut rng);
    (img, sp)
}

/// Deterministic in `(spec.category_id, sample_index, corpus_seed)`.
pub fn synthesize_triplet(
    spec: &CategorySpec,
    sample_index: u64,
    corpus_seed: u64,
    bank: &PromptBank,
    vocab: &Vocab,
    cfg: &SynthConfig,
) -> Result<Triplet> {
    if !(cfg.jitter >= 0.0) || cfg.image_size == 0 || cfg.mel_bins == 0 || cfg.frames == 0 {
        return config("synthesis sizes must be positive and jitter non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[corpus_seed, 0x5A3, spec.category_id as u64, sample_index]));
    let variant = bank.draw_index(&mut rng)?;
    let caption = bank.instantiate(variant, &spec.name)?;
    let tokens = vocab.tokenize(&caption, cfg.max_tokens)?;
    let latent =
        Latent { shift: rng.random_range(-1.0..1.0), gain: rng.random_range(0.4..1.0), variant, variants: bank.len() };
    let j = cfg.jitter;
    let (mut image, mut spectrogram) = if j == 0.0 {
        (
            render_image(&spec.image, cfg.image_size, None, 0.0, &mut rng),
            render_spectrogram(&spec.audio, cfg.mel_bins, cfg.frames, None, 0.0),
        )
    } else {
        (
            render_image(&spec.image, cfg.image_size, Some(latent), j, &mut rng),
            render_spectrogram(&spec.audio, cfg.mel_bins, cfg.frames, Some(latent), j),
        )
    };
    add_noise_and_clip(&mut image, 0.02 * j, &mut rng);
    add_noise_and_clip(&mut spectrogram, 0.02 * j, &mut rng);
    Ok(Triplet { image, tokens, spectrogram, category_id: spec.category_id, caption })
}
