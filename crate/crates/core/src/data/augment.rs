//! Training-time augmentations. Image kinds act on the image only, audio
//! kinds on the spectrogram only; tokens and category are never touched.

use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::synth::Triplet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    CropResize,
    HorizontalFlip,
    VerticalFlip,
    WhiteNoise,
    TimeShift,
    TimeStretch,
    FrequencyFlip,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 7] = [
        AugmentKind::CropResize,
        AugmentKind::HorizontalFlip,
        AugmentKind::VerticalFlip,
        AugmentKind::WhiteNoise,
        AugmentKind::TimeShift,
        AugmentKind::TimeStretch,
        AugmentKind::FrequencyFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::CropResize => "crop-resize",
            AugmentKind::HorizontalFlip => "horizontal-flip",
            AugmentKind::VerticalFlip => "vertical-flip",
            AugmentKind::WhiteNoise => "white-noise",
            AugmentKind::TimeShift => "time-shift",
            AugmentKind::TimeStretch => "time-stretch",
            AugmentKind::FrequencyFlip => "frequency-flip",
        }
    }

    /// Draws concrete parameters for this kind.
    pub fn sample<R: Rng + ?Sized>(self, triplet: &Triplet, rng: &mut R) -> Augmentation {
        match self {
            AugmentKind::CropResize => {
                let (h, w, _) = triplet.image.dim();
                let scale: f64 = rng.random_range(0.7..=1.0);
                let side = |n: usize| ((n as f64 * scale.sqrt()).round() as usize).clamp(1, n);
                let (ch, cw) = (side(h), side(w));
                Augmentation::CropResize {
                    top: rng.random_range(0..=h - ch),
                    left: rng.random_range(0..=w - cw),
                    height: ch,
                    width: cw,
                }
            }
            AugmentKind::HorizontalFlip => Augmentation::HorizontalFlip,
            AugmentKind::VerticalFlip => Augmentation::VerticalFlip,
            AugmentKind::WhiteNoise => Augmentation::WhiteNoise { amplitude: rng.random_range(0.0..0.05) },
            AugmentKind::TimeShift => Augmentation::TimeShift { frames: rng.random_range(-4..=4) },
            AugmentKind::TimeStretch => Augmentation::TimeStretch { rate: rng.random_range(0.9..1.1) },
            AugmentKind::FrequencyFlip => Augmentation::FrequencyFlip,
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation kind '{s}'")))
    }
}

/// A fully parameterized augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    CropResize {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    HorizontalFlip,
    VerticalFlip,
    WhiteNoise {
        amplitude: f32,
    },
    /// Circular shift along the frame axis.
    TimeShift {
        frames: i64,
    },
    /// Output frame `t` reads input position `t * rate`; zero past the end.
    TimeStretch {
        rate: f64,
    },
    FrequencyFlip,
}

/// Draws parameters for `kind` and applies it.
pub fn augment<R: Rng + ?Sized>(triplet: &Triplet, kind: AugmentKind, rng: &mut R) -> Result<Triplet> {
    let a = kind.sample(triplet, rng);
    apply(triplet, &a, rng)
}

pub fn apply<R: Rng + ?Sized>(triplet: &Triplet, aug: &Augmentation, rng: &mut R) -> Result<Triplet> {
    let mut out = triplet.clone();
    match *aug {
        Augmentation::CropResize { top, left, height, width } => {
            let (h, w, _) = triplet.image.dim();
            if height == 0 || width == 0 || top + height > h || left + width > w {
                return Err(Error::Config(format!("crop {height}x{width} at ({top}, {left}) exceeds a {h}x{w} image")));
            }
            out.image = crop_resize(&triplet.image, top, left, height, width);
        }
        Augmentation::HorizontalFlip => out.image.invert_axis(Axis(1)),
        Augmentation::VerticalFlip => out.image.invert_axis(Axis(0)),
        Augmentation::WhiteNoise { amplitude } => {
            if amplitude > 0.0 {
                let n = Normal::new(0.0f32, amplitude).map_err(|e| Error::Config(format!("noise amplitude: {e}")))?;
                out.spectrogram.iter_mut().for_each(|v| *v += n.sample(rng));
            } else if amplitude < 0.0 {
                return Err(Error::Config("noise amplitude must be non-negative".into()));
            }
        }
        Augmentation::TimeShift { frames } => out.spectrogram = time_shift(&triplet.spectrogram, frames),
        Augmentation::TimeStretch { rate } => {
            if !(rate > 0.0) {
                return Err(Error::Config("stretch rate must be positive".into()));
            }
            out.spectrogram = time_stretch(&triplet.spectrogram, rate);
        }
        Augmentation::FrequencyFlip => out.spectrogram.invert_axis(Axis(0)),
    }
    // invert_axis only rewrites strides; normalize the layout so byte-level
    // storage stays row-major.
    out.image = out.image.as_standard_layout().to_owned();
    out.spectrogram = out.spectrogram.as_standard_layout().to_owned();
    out.image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out.spectrogram.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

fn crop_resize(img: &Array3<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        let sy = ((y as f32 + 0.5) * ch as f32 / h as f32 - 0.5).clamp(0.0, (ch - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let fy = sy - y0 as f32;
        for x in 0..w {
            let sx = ((x as f32 + 0.5) * cw as f32 / w as f32 - 0.5).clamp(0.0, (cw - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let fx = sx - x0 as f32;
            for k in 0..c {
                let p = |yy: usize, xx: usize| img[[top + yy, left + xx, k]];
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                out[[y, x, k]] = v;
            }
        }
    }
    out
}

fn time_shift(spec: &Array2<f32>, frames: i64) -> Array2<f32> {
    let (f, t) = spec.dim();
    let mut out = Array2::<f32>::zeros((f, t));
    if t == 0 {
        return out;
    }
    for m in 0..f {
        for i in 0..t {
            let j = (i as i64 + frames).rem_euclid(t as i64) as usize;
            out[[m, j]] = spec[[m, i]];
        }
    }
    out
}

fn time_stretch(spec: &Array2<f32>, rate: f64) -> Array2<f32> {
    let (f, t) = spec.dim();
    let mut out = Array2::<f32>::zeros((f, t));
    for i in 0..t {
        let pos = i as f64 * rate;
        let i0 = pos.floor() as usize;
        if i0 >= t {
            break;
        }
        let frac = (pos - i0 as f64) as f32;
        let i1 = i0 + 1;
        for m in 0..f {
            let a = spec[[m, i0]];
            let b = if i1 < t { spec[[m, i1]] } else { 0.0 };
            out[[m, i]] = a * (1.0 - frac) + b * frac;
        }
    }
    out
}

/// Per-kind application probabilities for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub probabilities: Vec<(AugmentKind, f64)>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            probabilities: vec![
                (AugmentKind::CropResize, 0.3),
                (AugmentKind::HorizontalFlip, 0.1),
                (AugmentKind::VerticalFlip, 0.05),
                (AugmentKind::WhiteNoise, 0.5),
                (AugmentKind::TimeShift, 0.3),
                (AugmentKind::TimeStretch, 0.3),
                (AugmentKind::FrequencyFlip, 0.05),
            ],
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self { probabilities: Vec::new() }
    }

    pub fn apply<R: Rng + ?Sized>(&self, triplet: &Triplet, rng: &mut R) -> Result<Triplet> {
        let mut t = triplet.clone();
        for &(kind, p) in &self.probabilities {
            if rng.random_bool(p.clamp(0.0, 1.0)) {
                t = augment(&t, kind, rng)?;
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthesize_triplet, CategorySpec};
    use crate::data::{PromptBank, SynthConfig, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Triplet {
        let spec = CategorySpec::derive(1, "cat meowing", 4);
        let bank = PromptBank::training_default();
        let vocab = Vocab::from_words(bank.words().chain(["cat", "meowing"]));
        synthesize_triplet(&spec, 2, 4, &bank, &vocab, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let t = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = apply(&t, &Augmentation::HorizontalFlip, &mut rng).unwrap();
        assert_ne!(once.image, t.image);
        let twice = apply(&once, &Augmentation::HorizontalFlip, &mut rng).unwrap();
        assert_eq!(twice, t);
    }

    #[test]
    fn zero_noise_leaves_spectrogram() {
        let t = sample();
        let out = apply(&t, &Augmentation::WhiteNoise { amplitude: 0.0 }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.spectrogram, t.spectrogram);
    }

    #[test]
    fn circular_shift_round_trips() {
        let t = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [-7i64, 1, 3, 64, 130] {
            let a = apply(&t, &Augmentation::TimeShift { frames: s }, &mut rng).unwrap();
            let b = apply(&a, &Augmentation::TimeShift { frames: -s }, &mut rng).unwrap();
            assert_eq!(b.spectrogram, t.spectrogram, "shift {s}");
        }
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!(matches!("mixup".parse::<AugmentKind>(), Err(Error::Config(_))));
        assert_eq!("time-stretch".parse::<AugmentKind>().unwrap(), AugmentKind::TimeStretch);
    }

    #[test]
    fn every_kind_keeps_range_tokens_and_category() {
        let t = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in AugmentKind::ALL {
            for _ in 0..3 {
                let out = augment(&t, kind, &mut rng).unwrap();
                assert_eq!(out.tokens, t.tokens);
                assert_eq!(out.category_id, t.category_id);
                assert_eq!(out.image.dim(), t.image.dim());
                assert_eq!(out.spectrogram.dim(), t.spectrogram.dim());
                assert!(out.image.iter().chain(out.spectrogram.iter()).all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn unit_stretch_and_full_crop_are_identities() {
        let t = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = apply(&t, &Augmentation::TimeStretch { rate: 1.0 }, &mut rng).unwrap();
        assert_eq!(s.spectrogram, t.spectrogram);
        let c = apply(&t, &Augmentation::CropResize { top: 0, left: 0, height: 64, width: 64 }, &mut rng).unwrap();
        assert_eq!(c.image, t.image);
    }
}
