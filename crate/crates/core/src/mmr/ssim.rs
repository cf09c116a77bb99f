//! Structural similarity with a separable Gaussian window over valid
//! positions, and its gradient with respect to the second argument.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, c1: 1e-4, c2: 9e-4 }
    }
}

impl SsimParams {
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.window == 0 || !(self.sigma > 0.0) {
            return config("SSIM window and sigma must be positive");
        }
        if self.window > h || self.window > w {
            return config(format!("SSIM window {} exceeds the {h}x{w} input", self.window));
        }
        Ok(())
    }
}

/// Valid-mode separable filtering of an `h × w` plane.
struct Filter<'k> {
    k: &'k [f64],
    h: usize,
    w: usize,
}

impl Filter<'_> {
    fn oh(&self) -> usize {
        self.h - self.k.len() + 1
    }

    fn ow(&self) -> usize {
        self.w - self.k.len() + 1
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w, ow, oh, n) = (self.h, self.w, self.ow(), self.oh(), self.k.len());
        let mut tmp = vec![0.0; h * ow];
        for r in 0..h {
            let row = &x[r * w..(r + 1) * w];
            for c in 0..ow {
                tmp[r * ow + c] = (0..n).map(|t| self.k[t] * row[c + t]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for t in 0..n {
                let kt = self.k[t];
                let src = &tmp[(r + t) * ow..(r + t + 1) * ow];
                for (o, s) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                    *o += kt * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`Filter::apply`].
    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (h, w, ow, oh, n) = (self.h, self.w, self.ow(), self.oh(), self.k.len());
        let mut tmp = vec![0.0; h * ow];
        for r in 0..oh {
            for t in 0..n {
                let kt = self.k[t];
                let src = &g[r * ow..(r + 1) * ow];
                for (o, s) in tmp[(r + t) * ow..(r + t + 1) * ow].iter_mut().zip(src) {
                    *o += kt * s;
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..ow {
                let v = tmp[r * ow + c];
                for t in 0..n {
                    out[r * w + c + t] += self.k[t] * v;
                }
            }
        }
        out
    }
}

/// SSIM of two row-major `h × w` planes, with the gradient on `y` if asked.
pub(crate) fn ssim_plane(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    p: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    p.check(h, w)?;
    if x.len() != h * w || y.len() != h * w {
        return shape(format!("SSIM planes of {} and {} values for {h}x{w}", x.len(), y.len()));
    }
    let k = p.kernel();
    let f = Filter { k: &k, h, w };
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (f.apply(x), f.apply(y));
    let (exx, eyy, exy) = (f.apply(&xx), f.apply(&yy), f.apply(&xy));
    let m = mx.len();
    let inv_m = 1.0 / m as f64;

    let mut total = 0.0;
    let (mut g_my, mut g_exy, mut g_eyy) =
        if want_grad { (vec![0.0; m], vec![0.0; m], vec![0.0; m]) } else { (Vec::new(), Vec::new(), Vec::new()) };
    for i in 0..m {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + p.c1;
        let a2 = 2.0 * cxy + p.c2;
        let b1 = ux * ux + uy * uy + p.c1;
        let b2 = vx + vy + p.c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let d_a1 = a2 / (b1 * b2);
            let d_a2 = a1 / (b1 * b2);
            let d_b1 = -s / b1;
            let d_b2 = -s / b2;
            g_my[i] = inv_m * (2.0 * ux * (d_a1 - d_a2) + 2.0 * uy * (d_b1 - d_b2));
            g_exy[i] = inv_m * 2.0 * d_a2;
            g_eyy[i] = inv_m * d_b2;
        }
    }
    let value = total * inv_m;
    if !want_grad {
        return Ok((value, None));
    }
    let a = f.adjoint(&g_my);
    let b = f.adjoint(&g_exy);
    let c = f.adjoint(&g_eyy);
    let grad = (0..h * w).map(|i| a[i] + x[i] * b[i] + 2.0 * y[i] * c[i]).collect();
    Ok((value, Some(grad)))
}

/// Mean SSIM over the channels of planar `channels × h × w` data.
pub(crate) fn ssim_planar(
    x: &[f64],
    y: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    p: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if channels == 0 || x.len() != channels * h * w || y.len() != x.len() {
        return shape(format!("planar SSIM inputs of {} and {} values for {channels}x{h}x{w}", x.len(), y.len()));
    }
    let hw = h * w;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.len()]);
    for c in 0..channels {
        let r = c * hw..(c + 1) * hw;
        let (s, g) = ssim_plane(&x[r.clone()], &y[r.clone()], h, w, p, want_grad)?;
        total += s;
        if let (Some(dst), Some(g)) = (grad.as_mut(), g) {
            for (o, v) in dst[r].iter_mut().zip(g) {
                *o = v / channels as f64;
            }
        }
    }
    Ok((total / channels as f64, grad))
}

pub fn ssim(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: &SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return shape(format!("SSIM of {:?} and {:?}", x.shape(), y.shape()));
    }
    let (h, w) = x.dim();
    let xs: Vec<f64> = x.iter().copied().collect();
    let ys: Vec<f64> = y.iter().copied().collect();
    Ok(ssim_plane(&xs, &ys, h, w, p, false)?.0)
}

pub fn ssim_with_grad(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: &SsimParams) -> Result<(f64, Array2<f64>)> {
    if x.shape() != y.shape() {
        return shape(format!("SSIM of {:?} and {:?}", x.shape(), y.shape()));
    }
    let (h, w) = x.dim();
    let xs: Vec<f64> = x.iter().copied().collect();
    let ys: Vec<f64> = y.iter().copied().collect();
    let (s, g) = ssim_plane(&xs, &ys, h, w, p, true)?;
    let g = Array2::from_shape_vec((h, w), g.expect("requested")).expect("sized above");
    Ok((s, g))
}

/// HWC image to planar CHW values.
pub(crate) fn hwc_to_chw(x: ArrayView3<'_, f64>) -> Vec<f64> {
    x.permuted_axes([2, 0, 1]).iter().copied().collect()
}

pub(crate) fn chw_to_hwc(data: &[f64], c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_vec((c, h, w), data.to_vec())
        .expect("sized by caller")
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .to_owned()
}

/// Channel-averaged SSIM of two `H × W × C` images.
pub fn ssim_multichannel(x: ArrayView3<'_, f64>, y: ArrayView3<'_, f64>, p: &SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return shape(format!("SSIM of {:?} and {:?}", x.shape(), y.shape()));
    }
    let (h, w, c) = x.dim();
    Ok(ssim_planar(&hwc_to_chw(x), &hwc_to_chw(y), c, h, w, p, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_constant_inputs() {
        let p = SsimParams::default();
        let x = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        assert!((ssim(x.view(), x.view(), &p).unwrap() - 1.0).abs() < 1e-12);
        let a = Array2::from_elem((12, 12), 0.25);
        let b = Array2::from_elem((12, 12), 0.75);
        assert!((ssim(a.view(), b.view(), &p).unwrap() - 0.600_063_989_761_638_1).abs() < 1e-12);
    }

    #[test]
    fn window_too_large() {
        let a = Array2::<f64>::zeros((8, 20));
        assert!(ssim(a.view(), a.view(), &SsimParams::default()).is_err());
    }

    #[test]
    fn adjoint_is_transpose() {
        let k = SsimParams { window: 3, ..Default::default() }.kernel();
        let f = Filter { k: &k, h: 5, w: 6 };
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..f.oh() * f.ow()).map(|i| (i as f64 * 0.71).cos()).collect();
        let lhs: f64 = f.apply(&x).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(f.adjoint(&g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
