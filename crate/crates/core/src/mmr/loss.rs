//! Reconstruction losses for each missing modality and their gradients
//! with respect to the reconstruction.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use super::ssim::{chw_to_hwc, hwc_to_chw, ssim_planar, SsimParams};
use super::ReconConfig;
use crate::error::{config, shape, Error, Result};
use crate::modality::Modality;

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return config(format!("{name} must lie in [0, 1], got {w}"));
    }
    Ok(())
}

/// `weight·(1 − SSIM) + (1 − weight)·MSE` over planar `c × h × w` data,
/// with the gradient on `recon` when requested.
pub(crate) fn structural_loss(
    target: &[f64],
    recon: &[f64],
    dims: (usize, usize, usize),
    weight: f64,
    p: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (c, h, w) = dims;
    if target.len() != recon.len() || target.len() != c * h * w {
        return shape(format!("reconstruction of {} values against {} for {c}x{h}x{w}", recon.len(), target.len()));
    }
    if recon.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite reconstruction".into()));
    }
    let n = target.len() as f64;
    let mse = target.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    // SSIM is skipped entirely at weight 0 so that pure-MSE losses accept
    // inputs smaller than the window.
    let (s, g) = if weight > 0.0 { ssim_planar(target, recon, c, h, w, p, want_grad)? } else { (1.0, None) };
    let loss = weight * (1.0 - s) + (1.0 - weight) * mse;
    let grad = want_grad.then(|| {
        let mut d: Vec<f64> = target.iter().zip(recon).map(|(a, b)| (1.0 - weight) * 2.0 * (b - a) / n).collect();
        if let Some(g) = g {
            for (o, gs) in d.iter_mut().zip(g) {
                *o -= weight * gs;
            }
        }
        d
    });
    Ok((loss, grad))
}

/// `eta ×` mean softmax cross-entropy over all rows of a `L × V` score matrix.
pub(crate) fn token_loss(
    targets: &[u32],
    scores: &[f64],
    vocab: usize,
    eta: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if eta < 0.0 || !eta.is_finite() {
        return config(format!("eta must be non-negative, got {eta}"));
    }
    if vocab == 0 || scores.len() != targets.len() * vocab || targets.is_empty() {
        return shape(format!("{} scores for {} positions over {vocab} tokens", scores.len(), targets.len()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite token scores".into()));
    }
    let l = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; scores.len()]);
    for (pos, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::Range(format!("target token {t} outside a vocabulary of {vocab}")));
        }
        let row = &scores[pos * vocab..(pos + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t as usize];
        if let Some(g) = grad.as_mut() {
            let dst = &mut g[pos * vocab..(pos + 1) * vocab];
            for (j, (o, v)) in dst.iter_mut().zip(row).enumerate() {
                let p = (v - lse).exp();
                *o = eta * (p - if j == t as usize { 1.0 } else { 0.0 }) / l;
            }
        }
    }
    Ok((eta * total / l, grad))
}

fn image_parts(
    i: ArrayView3<'_, f64>,
    i_hat: ArrayView3<'_, f64>,
) -> Result<(Vec<f64>, Vec<f64>, (usize, usize, usize))> {
    if i.shape() != i_hat.shape() {
        return shape(format!("image {:?} against reconstruction {:?}", i.shape(), i_hat.shape()));
    }
    let (h, w, c) = i.dim();
    Ok((hwc_to_chw(i), hwc_to_chw(i_hat), (c, h, w)))
}

pub fn recon_loss_image(i: ArrayView3<'_, f64>, i_hat: ArrayView3<'_, f64>, delta: f64) -> Result<f64> {
    check_weight("delta", delta)?;
    let (a, b, dims) = image_parts(i, i_hat)?;
    Ok(structural_loss(&a, &b, dims, delta, &SsimParams::default(), false)?.0)
}

pub fn recon_loss_image_with_grad(
    i: ArrayView3<'_, f64>,
    i_hat: ArrayView3<'_, f64>,
    delta: f64,
) -> Result<(f64, Array3<f64>)> {
    check_weight("delta", delta)?;
    let (a, b, (c, h, w)) = image_parts(i, i_hat)?;
    let (l, g) = structural_loss(&a, &b, (c, h, w), delta, &SsimParams::default(), true)?;
    Ok((l, chw_to_hwc(&g.expect("requested"), c, h, w)))
}

fn audio_parts(
    a: ArrayView2<'_, f64>,
    a_hat: ArrayView2<'_, f64>,
) -> Result<(Vec<f64>, Vec<f64>, (usize, usize, usize))> {
    if a.shape() != a_hat.shape() {
        return shape(format!("spectrogram {:?} against reconstruction {:?}", a.shape(), a_hat.shape()));
    }
    let (h, w) = a.dim();
    Ok((a.iter().copied().collect(), a_hat.iter().copied().collect(), (1, h, w)))
}

pub fn recon_loss_audio(a: ArrayView2<'_, f64>, a_hat: ArrayView2<'_, f64>, theta: f64) -> Result<f64> {
    check_weight("theta", theta)?;
    let (x, y, dims) = audio_parts(a, a_hat)?;
    Ok(structural_loss(&x, &y, dims, theta, &SsimParams::default(), false)?.0)
}

pub fn recon_loss_audio_with_grad(
    a: ArrayView2<'_, f64>,
    a_hat: ArrayView2<'_, f64>,
    theta: f64,
) -> Result<(f64, Array2<f64>)> {
    check_weight("theta", theta)?;
    let (x, y, (_, h, w)) = audio_parts(a, a_hat)?;
    let (l, g) = structural_loss(&x, &y, (1, h, w), theta, &SsimParams::default(), true)?;
    Ok((l, Array2::from_shape_vec((h, w), g.expect("requested")).expect("sized above")))
}

fn text_scores(scores: ArrayView2<'_, f64>, targets: &[u32]) -> Result<Vec<f64>> {
    if scores.nrows() != targets.len() {
        return shape(format!("{} score rows for {} positions", scores.nrows(), targets.len()));
    }
    Ok(scores.iter().copied().collect())
}

pub fn recon_loss_text(t: &[u32], scores: ArrayView2<'_, f64>, eta: f64) -> Result<f64> {
    let s = text_scores(scores, t)?;
    Ok(token_loss(t, &s, scores.ncols(), eta, false)?.0)
}

pub fn recon_loss_text_with_grad(t: &[u32], scores: ArrayView2<'_, f64>, eta: f64) -> Result<(f64, Array2<f64>)> {
    let s = text_scores(scores, t)?;
    let (l, g) = token_loss(t, &s, scores.ncols(), eta, true)?;
    Ok((l, Array2::from_shape_vec(scores.dim(), g.expect("requested")).expect("sized above")))
}

/// Ground truth of the missing modality with its reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub enum ReconstructionPair {
    /// `H × W × 3` images.
    Image { original: Array3<f64>, reconstructed: Array3<f64> },
    /// Target ids and an `L × V` score matrix.
    Text { original: Vec<u32>, reconstructed: Array2<f64> },
    /// `F × T` spectrograms.
    Audio { original: Array2<f64>, reconstructed: Array2<f64> },
}

impl ReconstructionPair {
    pub fn modality(&self) -> Modality {
        match self {
            ReconstructionPair::Image { .. } => Modality::Image,
            ReconstructionPair::Text { .. } => Modality::Text,
            ReconstructionPair::Audio { .. } => Modality::Audio,
        }
    }
}

/// Dispatches on the missing modality.
pub fn recon_loss(missing: Modality, pair: &ReconstructionPair, cfg: &ReconConfig) -> Result<f64> {
    if pair.modality() != missing {
        return config(format!("{missing} is missing but a {} reconstruction was supplied", pair.modality()));
    }
    match pair {
        ReconstructionPair::Image { original, reconstructed } => {
            recon_loss_image(original.view(), reconstructed.view(), cfg.delta)
        }
        ReconstructionPair::Text { original, reconstructed } => {
            recon_loss_text(original, reconstructed.view(), cfg.eta)
        }
        ReconstructionPair::Audio { original, reconstructed } => {
            recon_loss_audio(original.view(), reconstructed.view(), cfg.theta)
        }
    }
}
