#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trimodal::tensor::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn eye(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let a = normal_matrix(rng, d, d);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in 0..d {
        let mut v = a.row(r).to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        q.push(v);
    }
    Matrix::from_rows(&q).unwrap()
}

/// Brute-force symmetric contrastive loss: plain softmax cross-entropy over
/// cosine logits in both directions, each averaged over the batch.
pub fn clip_oracle(h1: &Matrix, h2: &Matrix, tau: f64) -> f64 {
    let n = h1.rows();
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (h1.row(i), h2.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            s[i][j] = dot / (norm(a) * norm(b)) / tau;
        }
    }
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        let zr: f64 = (0..n).map(|j| s[i][j].exp()).sum();
        let zc: f64 = (0..n).map(|j| s[j][i].exp()).sum();
        rows -= (s[i][i].exp() / zr).ln();
        cols -= (s[i][i].exp() / zc).ln();
    }
    rows / n as f64 + cols / n as f64
}

/// Largest relative error between analytic and central-difference gradients
/// of `f` at `x`. The denominator is floored at `floor`.
pub fn max_fd_rel_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + step;
        let up = f(&p);
        p[i] = x[i] - step;
        let down = f(&p);
        p[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
