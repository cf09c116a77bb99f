//! Pairwise symmetric contrastive loss and the weighted tri-modal objective.

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::modality::Modality;
use crate::tensor::Matrix;

const NORM_EPS: f64 = 1e-12;

/// Bounds on `ln τ` when the temperature is learned.
pub const LOG_TAU_MIN: f64 = -5.0;
pub const LOG_TAU_MAX: f64 = 0.0;

/// The three modality pairs in the order their weights are listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pair {
    ImgTxt,
    TxtAud,
    AudImg,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::ImgTxt, Pair::TxtAud, Pair::AudImg];

    pub fn modalities(self) -> (Modality, Modality) {
        match self {
            Pair::ImgTxt => (Modality::Image, Modality::Text),
            Pair::TxtAud => (Modality::Text, Modality::Audio),
            Pair::AudImg => (Modality::Audio, Modality::Image),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pair::ImgTxt => "img-txt",
            Pair::TxtAud => "txt-aud",
            Pair::AudImg => "aud-img",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Pair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Pair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img-txt" | "txt-img" => Ok(Pair::ImgTxt),
            "txt-aud" | "aud-txt" => Ok(Pair::TxtAud),
            "aud-img" | "img-aud" => Ok(Pair::AudImg),
            _ => config(format!("unknown modality pair '{s}' (expected img-txt, txt-aud or aud-img)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub tau_learnable: bool,
    /// Per-pair temperature override, in img-txt, txt-aud, aud-img order.
    #[serde(default)]
    pub pair_tau: Option<[f64; 3]>,
    pub d_proj: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0, tau: 0.07, tau_learnable: false, pair_tau: None, d_proj: 64 }
    }
}

impl AlignmentConfig {
    pub fn weights(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn weight(&self, p: Pair) -> f64 {
        self.weights()[p.index()]
    }

    pub fn tau_for(&self, p: Pair) -> f64 {
        self.pair_tau.map_or(self.tau, |t| t[p.index()])
    }

    /// Keeps only the listed pairs by zeroing the other weights.
    pub fn restricted_to(mut self, pairs: &[Pair]) -> Self {
        if !pairs.contains(&Pair::ImgTxt) {
            self.alpha = 0.0;
        }
        if !pairs.contains(&Pair::TxtAud) {
            self.beta = 0.0;
        }
        if !pairs.contains(&Pair::AudImg) {
            self.gamma = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return config(format!("{name} must be a finite non-negative weight, got {w}"));
            }
        }
        let taus = self.pair_tau.map_or(vec![self.tau], |t| t.to_vec());
        for t in std::iter::once(self.tau).chain(taus) {
            if !(t > 0.0 && t.is_finite()) {
                return config(format!("temperature must be positive, got {t}"));
            }
        }
        if self.pair_tau.is_some() && self.tau_learnable {
            return config("a learnable temperature cannot be combined with per-pair overrides");
        }
        if self.d_proj == 0 {
            return config("d_proj must be positive");
        }
        Ok(())
    }
}

/// Raw pair losses and their weighted sum. A pair whose weight is zero is not
/// evaluated and reports 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairLossBreakdown {
    pub loss_img_txt: f64,
    pub loss_txt_aud: f64,
    pub loss_aud_img: f64,
    pub total: f64,
}

impl PairLossBreakdown {
    pub fn from_pairs(losses: [f64; 3], cfg: &AlignmentConfig) -> Self {
        let w = cfg.weights();
        let total = w[0] * losses[0] + w[1] * losses[1] + w[2] * losses[2];
        Self { loss_img_txt: losses[0], loss_txt_aud: losses[1], loss_aud_img: losses[2], total }
    }

    pub fn pair(&self, p: Pair) -> f64 {
        match p {
            Pair::ImgTxt => self.loss_img_txt,
            Pair::TxtAud => self.loss_txt_aud,
            Pair::AudImg => self.loss_aud_img,
        }
    }
}

fn check_pair(h1: &Matrix, h2: &Matrix) -> Result<()> {
    if h1.shape() != h2.shape() {
        return shape(format!("embedding batches {:?} and {:?} differ", h1.shape(), h2.shape()));
    }
    if h1.rows() == 0 || h1.cols() == 0 {
        return shape("embedding batches must be non-empty");
    }
    if !h1.is_finite() || !h2.is_finite() {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    Ok(())
}

fn unit_rows(h: &Matrix) -> (Matrix, Vec<f64>) {
    let norms: Vec<f64> = h.row_norms().into_iter().map(|n| n.max(NORM_EPS)).collect();
    let mut u = h.clone();
    for (r, n) in norms.iter().enumerate() {
        u.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    (u, norms)
}

/// Cosine similarity between every row of `h1` and every row of `h2`.
pub fn similarity_matrix(h1: &Matrix, h2: &Matrix) -> Result<Matrix> {
    if h1.cols() != h2.cols() {
        return shape(format!("embedding widths {} and {} differ", h1.cols(), h2.cols()));
    }
    let (u1, _) = unit_rows(h1);
    let (u2, _) = unit_rows(h2);
    u1.matmul(&u2.transpose())
}

#[derive(Debug, Clone)]
pub struct ClipLossGrad {
    pub loss: f64,
    pub d_h1: Matrix,
    pub d_h2: Matrix,
    pub d_tau: f64,
}

/// Sum taken in ascending order, so the result does not depend on the
/// order in which the terms arrive.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + ordered_sum(xs.map(|x| (x - max).exp()).collect()).ln()
}

pub fn clip_loss(h1: &Matrix, h2: &Matrix, tau: f64) -> Result<f64> {
    clip_loss_with_grad(h1, h2, tau).map(|g| g.loss)
}

/// Symmetric cross-entropy over the `N × N` similarity logits `sim / τ`,
/// averaged over rows, with gradients for both inputs and `τ`.
pub fn clip_loss_with_grad(h1: &Matrix, h2: &Matrix, tau: f64) -> Result<ClipLossGrad> {
    if !(tau > 0.0 && tau.is_finite()) {
        return config(format!("temperature must be positive, got {tau}"));
    }
    check_pair(h1, h2)?;
    let n = h1.rows();
    let (u1, n1) = unit_rows(h1);
    let (u2, n2) = unit_rows(h2);
    let sim = u1.matmul(&u2.transpose())?;
    let logit = |i: usize, j: usize| sim.get(i, j) / tau;

    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp((0..n).map(move |j| logit(i, j)))).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(move |i| logit(i, j)))).collect();
    // Each term is formed relative to its own diagonal logit so that nearly
    // saturated softmaxes keep full relative precision.
    let terms = (0..n)
        .map(|i| {
            let d = logit(i, i);
            log_sum_exp((0..n).map(move |j| logit(i, j) - d)) + log_sum_exp((0..n).map(move |j| logit(j, i) - d))
        })
        .collect();
    let loss = ordered_sum(terms) / n as f64;

    let inv_n = 1.0 / n as f64;
    let mut dz = Matrix::zeros(n, n);
    let mut d_tau = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = logit(i, j);
            let p_row = (z - row_lse[i]).exp();
            let p_col = (z - col_lse[j]).exp();
            let eye = if i == j { 2.0 } else { 0.0 };
            let g = inv_n * (p_row + p_col - eye);
            dz.set(i, j, g);
            d_tau -= g * z / tau;
        }
    }
    let mut du1 = dz.matmul(&u2)?;
    let mut du2 = dz.transpose().matmul(&u1)?;
    du1.data_mut().iter_mut().for_each(|v| *v /= tau);
    du2.data_mut().iter_mut().for_each(|v| *v /= tau);
    Ok(ClipLossGrad {
        loss,
        d_h1: through_normalization(&u1, &n1, &du1),
        d_h2: through_normalization(&u2, &n2, &du2),
        d_tau,
    })
}

/// Pulls a gradient on `u = h / ‖h‖` back to `h`.
fn through_normalization(u: &Matrix, norms: &[f64], du: &Matrix) -> Matrix {
    let mut dh = du.clone();
    for (r, &n) in norms.iter().enumerate() {
        let dot: f64 = u.row(r).iter().zip(du.row(r)).map(|(a, b)| a * b).sum();
        for (o, &ui) in dh.row_mut(r).iter_mut().zip(u.row(r)) {
            *o = (*o - ui * dot) / n;
        }
    }
    dh
}

#[derive(Debug, Clone)]
pub struct AlignmentGrad {
    pub breakdown: PairLossBreakdown,
    /// Gradients of the weighted total, per modality in canonical order.
    pub d_embeddings: [Matrix; 3],
    /// Gradient of the weighted total with respect to each pair's temperature.
    pub d_tau: [f64; 3],
}

fn check_batches(h: [&Matrix; 3]) -> Result<()> {
    if h[0].rows() != h[1].rows() || h[1].rows() != h[2].rows() {
        return shape(format!(
            "batch sizes differ across modalities ({}, {}, {})",
            h[0].rows(),
            h[1].rows(),
            h[2].rows()
        ));
    }
    Ok(())
}

pub fn total_alignment_loss(
    h_img: &Matrix,
    h_txt: &Matrix,
    h_aud: &Matrix,
    cfg: &AlignmentConfig,
) -> Result<PairLossBreakdown> {
    cfg.validate()?;
    let h = [h_img, h_txt, h_aud];
    check_batches(h)?;
    let mut losses = [0.0; 3];
    for p in Pair::ALL {
        if cfg.weight(p) == 0.0 {
            continue;
        }
        let (a, b) = p.modalities();
        losses[p.index()] = clip_loss(h[a.index()], h[b.index()], cfg.tau_for(p))?;
    }
    Ok(PairLossBreakdown::from_pairs(losses, cfg))
}

pub fn total_alignment_loss_with_grad(
    h_img: &Matrix,
    h_txt: &Matrix,
    h_aud: &Matrix,
    cfg: &AlignmentConfig,
) -> Result<AlignmentGrad> {
    cfg.validate()?;
    let h = [h_img, h_txt, h_aud];
    check_batches(h)?;
    let mut losses = [0.0; 3];
    let mut d_tau = [0.0; 3];
    let mut d = h.map(|m| Matrix::zeros(m.rows(), m.cols()));
    for p in Pair::ALL {
        let w = cfg.weight(p);
        if w == 0.0 {
            continue;
        }
        let (a, b) = p.modalities();
        let g = clip_loss_with_grad(h[a.index()], h[b.index()], cfg.tau_for(p))?;
        losses[p.index()] = g.loss;
        d_tau[p.index()] = w * g.d_tau;
        for (dst, src) in [(a, &g.d_h1), (b, &g.d_h2)] {
            for (o, v) in d[dst.index()].data_mut().iter_mut().zip(src.data()) {
                *o += w * v;
            }
        }
    }
    Ok(AlignmentGrad { breakdown: PairLossBreakdown::from_pairs(losses, cfg), d_embeddings: d, d_tau })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize, d: usize) -> Matrix {
        let mut m = Matrix::zeros(n, d);
        for i in 0..n.min(d) {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let h = Matrix::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let g = Matrix::from_rows(&[vec![-1.0, 0.5, 0.1]]).unwrap();
        assert_eq!(clip_loss(&h, &g, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_matches() {
        let e = eye(2, 2);
        let l = clip_loss(&e, &e, 1.0).unwrap();
        assert!((l - 0.626_523_375_036_445_7).abs() < 1e-12);
        let l = clip_loss(&e, &e, 0.1).unwrap();
        assert!((l - 9.079_779_843_372_93e-5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_temperature_and_shapes() {
        let e = eye(2, 2);
        assert!(matches!(clip_loss(&e, &e, 0.0), Err(Error::Config(_))));
        assert!(matches!(clip_loss(&e, &eye(3, 2), 1.0), Err(Error::Shape(_))));
        let mut bad = e.clone();
        bad.set(0, 0, f64::NAN);
        assert!(matches!(clip_loss(&bad, &e, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_weight_pairs_are_skipped() {
        let e = eye(3, 3);
        let cfg = AlignmentConfig::default().restricted_to(&[Pair::ImgTxt]);
        let b = total_alignment_loss(&e, &e, &e, &cfg).unwrap();
        assert_eq!(b.loss_txt_aud, 0.0);
        assert_eq!(b.loss_aud_img, 0.0);
        assert_eq!(b.total, b.loss_img_txt);
    }

    #[test]
    fn pair_names_parse() {
        assert_eq!("txt-img".parse::<Pair>().unwrap(), Pair::ImgTxt);
        assert!("img-vid".parse::<Pair>().is_err());
    }
}
