//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation applied during one forward pass; a
//! single call to [`Graph::backward`] then walks the tape in reverse and
//! returns gradients for the parameters that were read into the graph.
//! Batched sequence data is laid out as `(batch * seq) × width` rows.

use std::collections::HashMap;

use crate::error::{shape, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a transposed 2-D convolution over `C × H × W` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - 1) * self.stride + self.kernel - 2 * self.padding
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) * self.stride + self.kernel - 2 * self.padding
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn weight_cols(&self) -> usize {
        self.out_channels * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    Gather { srcs: Vec<Var>, index: Vec<(usize, usize)> },
    MaskedMean { x: Var, seq: usize, mask: Vec<bool>, counts: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Reshape(Var),
    ConvTranspose { x: Var, w: Var, b: Var, geom: ConvGeom },
    Loss { inputs: Vec<Var>, grads: Vec<Matrix> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    frozen_groups: Vec<String>,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new(), frozen_groups: Vec::new() }
    }

    /// A graph in which parameters of `groups` are read as constants.
    pub fn with_frozen(store: &'s ParamStore, groups: &[&str]) -> Self {
        let mut g = Self::new(store);
        g.frozen_groups = groups.iter().map(|s| s.to_string()).collect();
        g
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let trainable = !self.frozen_groups.contains(&entry.group);
        let v = self.push(entry.value.clone(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape(format!("add {:?} and {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(row));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return shape(format!("bias {:?} for input {:?}", vb.shape(), va.shape()));
        }
        let mut out = va.clone();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Adds an `S × n` block to each consecutive group of `S` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, block: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(block));
        if vb.cols() != va.cols() || vb.rows() == 0 || va.rows() % vb.rows() != 0 {
            return shape(format!("tile {:?} over {:?}", vb.shape(), va.shape()));
        }
        let mut out = va.clone();
        let blen = vb.data().len();
        for chunk in out.data_mut().chunks_mut(blen) {
            for (o, b) in chunk.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(block);
        Ok(self.push(out, Op::AddTiled(a, block), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if self.value(gain).shape() != (1, n) || self.value(bias).shape() != (1, n) {
            return shape(format!("layer norm parameters do not match width {n}"));
        }
        let mut xhat = vec![0.0; vx.data().len()];
        let mut inv_std = vec![0.0; vx.rows()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Matrix::zeros(vx.rows(), n);
        for (r, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            for c in 0..n {
                chunk[c] = xhat[r * n + c] * g[c] + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`. `key_mask[b * seq + s] == false` hides key `s` of
    /// sequence `b` from every query of that sequence.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let d = self.value(q).cols();
        for m in [q, k, v] {
            if self.value(m).shape() != (batch * seq, d) {
                return shape(format!("attention expects {}x{d} inputs, got {:?}", batch * seq, self.value(m).shape()));
            }
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return shape(format!("width {d} is not divisible into {heads} heads"));
        }
        if let Some(m) = key_mask {
            if m.len() != batch * seq {
                return shape("key mask length does not match the batch".to_string());
            }
            for b in 0..batch {
                if !m[b * seq..(b + 1) * seq].iter().any(|&x| x) {
                    return shape(format!("sequence {b} has no visible keys"));
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = Matrix::zeros(batch * seq, d);
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                    gemm(seq, dh, seq, MatRef::new(&qd[off..], d, 1), MatRef::new(&kd[off..], 1, d), p, seq, false);
                    for i in 0..seq {
                        let row = &mut p[i * seq..(i + 1) * seq];
                        let mut max = f64::NEG_INFINITY;
                        for (j, x) in row.iter_mut().enumerate() {
                            let visible = key_mask.is_none_or(|m| m[b * seq + j]);
                            *x = if visible { *x * scale } else { f64::NEG_INFINITY };
                            max = max.max(*x);
                        }
                        let mut sum = 0.0;
                        for x in row.iter_mut() {
                            *x = (*x - max).exp();
                            sum += *x;
                        }
                        row.iter_mut().for_each(|x| *x /= sum);
                    }
                    gemm(
                        seq,
                        seq,
                        dh,
                        MatRef::new(p, seq, 1),
                        MatRef::new(&vd[off..], d, 1),
                        &mut out.data_mut()[off..],
                        d,
                        false,
                    );
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, batch, seq, heads, probs }, ng))
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `srcs[index[r].0]`.
    pub fn gather(&mut self, srcs: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let cols = match srcs.first() {
            Some(&s) => self.value(s).cols(),
            None => return shape("gather needs at least one source".to_string()),
        };
        if srcs.iter().any(|&s| self.value(s).cols() != cols) {
            return shape("gather sources differ in width".to_string());
        }
        let mut out = Matrix::zeros(index.len(), cols);
        for (r, &(s, i)) in index.iter().enumerate() {
            let src = self.value(
                *srcs.get(s).ok_or_else(|| crate::error::Error::Shape(format!("gather source {s} out of range")))?,
            );
            if i >= src.rows() {
                return shape(format!("gather row {i} of a {}-row source", src.rows()));
            }
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        let ng = srcs.iter().any(|&s| self.needs(s));
        Ok(self.push(out, Op::Gather { srcs: srcs.to_vec(), index }, ng))
    }

    /// Row selection from a single source.
    pub fn rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        self.gather(&[src], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Mean over the rows of each length-`seq` group whose mask entry is set.
    pub fn masked_mean(&mut self, x: Var, seq: usize, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if seq == 0 || !vx.rows().is_multiple_of(seq) || mask.len() != vx.rows() {
            return shape(format!("masked mean over {:?} with seq {seq}", vx.shape()));
        }
        let groups = vx.rows() / seq;
        let mut counts = vec![0usize; groups];
        let mut out = Matrix::zeros(groups, vx.cols());
        for g in 0..groups {
            for s in 0..seq {
                let r = g * seq + s;
                if mask[r] {
                    counts[g] += 1;
                    for (o, v) in out.row_mut(g).iter_mut().zip(vx.row(r)) {
                        *o += v;
                    }
                }
            }
            if counts[g] == 0 {
                return shape(format!("group {g} has no unmasked rows"));
            }
            let c = counts[g] as f64;
            out.row_mut(g).iter_mut().for_each(|v| *v /= c);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaskedMean { x, seq, mask: mask.to_vec(), counts }, ng))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let norms: Vec<f64> = out.row_norms().into_iter().map(|n| n.max(NORM_EPS)).collect();
        for (r, n) in norms.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Transposed convolution. `x` rows hold one `C_in × H × W` sample each,
    /// `w` is `C_in × (C_out·k·k)` and `b` is `1 × C_out`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.cols() != geom.in_len()
            || vw.shape() != (geom.in_channels, geom.weight_cols())
            || vb.shape() != (1, geom.out_channels)
        {
            return shape(format!(
                "transposed conv with input {:?}, weight {:?}, bias {:?} for {geom:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            ));
        }
        let hw = geom.height * geom.width;
        let ohw = geom.out_height() * geom.out_width();
        let mut cols = vec![0.0; geom.weight_cols() * hw];
        let mut out = Matrix::zeros(vx.rows(), geom.out_len());
        for n in 0..vx.rows() {
            gemm(
                geom.weight_cols(),
                geom.in_channels,
                hw,
                MatRef::transposed(vw.data(), geom.weight_cols()),
                MatRef::new(vx.row(n), hw, 1),
                &mut cols,
                hw,
                false,
            );
            let o = out.row_mut(n);
            for co in 0..geom.out_channels {
                o[co * ohw..(co + 1) * ohw].fill(vb.data()[co]);
            }
            col2im(&cols, o, &geom);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom }, ng))
    }

    /// Attaches a scalar whose gradient with respect to each input has
    /// already been computed analytically.
    pub fn loss(&mut self, value: f64, inputs: &[Var], grads: Vec<Matrix>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return shape("one gradient per loss input is required".to_string());
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.value(v).shape() != g.shape() {
                return shape(format!(
                    "loss gradient {:?} does not match input {:?}",
                    g.shape(),
                    self.value(v).shape()
                ));
            }
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Matrix::scalar(value), Op::Loss { inputs: inputs.to_vec(), grads }, ng))
    }

    /// Gradients of the scalar `root` with respect to every trainable
    /// parameter that contributed to it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return shape("backward needs a scalar root".to_string());
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients { grads: vec![None; self.store.len()] };

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(va.rows(), va.cols());
                        gemm(
                            g.rows(),
                            g.cols(),
                            vb.rows(),
                            MatRef::new(g.data(), g.cols(), 1),
                            MatRef::transposed(vb.data(), vb.cols()),
                            ga.data_mut(),
                            va.cols(),
                            false,
                        );
                        accum(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                        gemm(
                            va.cols(),
                            va.rows(),
                            g.cols(),
                            MatRef::transposed(va.data(), va.cols()),
                            MatRef::new(g.data(), g.cols(), 1),
                            gb.data_mut(),
                            vb.cols(),
                            false,
                        );
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accum(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accum(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut gr = Matrix::zeros(1, g.cols());
                        for chunk in g.data().chunks(g.cols()) {
                            for (o, v) in gr.data_mut().iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        accum(&mut grads, *row, gr);
                    }
                    if self.needs(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::AddTiled(a, block) => {
                    if self.needs(*block) {
                        let vb = self.value(*block);
                        let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                        for chunk in g.data().chunks(vb.data().len()) {
                            for (o, v) in gb.data_mut().iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        accum(&mut grads, *block, gb);
                    }
                    if self.needs(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    ga.data_mut().iter_mut().for_each(|v| *v *= c);
                    accum(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    for (o, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= gelu_grad(*x);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (o, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (1.0 - y);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = g.cols();
                    let gv = self.value(*gain).data();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut gg = Matrix::zeros(1, n);
                        let mut gb = Matrix::zeros(1, n);
                        for (r, chunk) in g.data().chunks(n).enumerate() {
                            for c in 0..n {
                                gg.data_mut()[c] += chunk[c] * xhat[r * n + c];
                                gb.data_mut()[c] += chunk[c];
                            }
                        }
                        if self.needs(*gain) {
                            accum(&mut grads, *gain, gg);
                        }
                        if self.needs(*bias) {
                            accum(&mut grads, *bias, gb);
                        }
                    }
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(g.rows(), n);
                        let mut dxhat = vec![0.0; n];
                        for (r, chunk) in g.data().chunks(n).enumerate() {
                            let xh = &xhat[r * n..(r + 1) * n];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..n {
                                dxhat[c] = chunk[c] * gv[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * xh[c];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = inv_std[r] * (dxhat[c] - m1 - xh[c] * m2);
                            }
                        }
                        accum(&mut grads, *x, gx);
                    }
                }
                Op::Attention { q, k, v, batch, seq, heads, probs } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let d = g.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut gq = Matrix::zeros(batch * seq, d);
                    let mut gk = Matrix::zeros(batch * seq, d);
                    let mut gv = Matrix::zeros(batch * seq, d);
                    let mut dp = vec![0.0; seq * seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = b * seq * d + h * dh;
                            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                            // dP = dO · Vᵀ
                            gemm(
                                seq,
                                dh,
                                seq,
                                MatRef::new(&g.data()[off..], d, 1),
                                MatRef::new(&vd[off..], 1, d),
                                &mut dp,
                                seq,
                                false,
                            );
                            // dV = Pᵀ · dO
                            gemm(
                                seq,
                                seq,
                                dh,
                                MatRef::new(p, 1, seq),
                                MatRef::new(&g.data()[off..], d, 1),
                                &mut gv.data_mut()[off..],
                                d,
                                false,
                            );
                            for i in 0..seq {
                                let pr = &p[i * seq..(i + 1) * seq];
                                let dr = &mut dp[i * seq..(i + 1) * seq];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for (x, pv) in dr.iter_mut().zip(pr) {
                                    *x = pv * (*x - dot) * scale;
                                }
                            }
                            gemm(
                                seq,
                                seq,
                                dh,
                                MatRef::new(&dp, seq, 1),
                                MatRef::new(&kd[off..], d, 1),
                                &mut gq.data_mut()[off..],
                                d,
                                false,
                            );
                            gemm(
                                seq,
                                seq,
                                dh,
                                MatRef::new(&dp, 1, seq),
                                MatRef::new(&qd[off..], d, 1),
                                &mut gk.data_mut()[off..],
                                d,
                                false,
                            );
                        }
                    }
                    for (var, gm) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if self.needs(var) {
                            accum(&mut grads, var, gm);
                        }
                    }
                }
                Op::Gather { srcs, index } => {
                    let mut parts: Vec<Option<Matrix>> = srcs
                        .iter()
                        .map(|&s| {
                            self.needs(s).then(|| {
                                let vs = self.value(s);
                                Matrix::zeros(vs.rows(), vs.cols())
                            })
                        })
                        .collect();
                    for (r, &(s, i)) in index.iter().enumerate() {
                        if let Some(p) = parts[s].as_mut() {
                            for (o, v) in p.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    for (&s, p) in srcs.iter().zip(parts) {
                        if let Some(p) = p {
                            accum(&mut grads, s, p);
                        }
                    }
                }
                Op::MaskedMean { x, seq, mask, counts } => {
                    let vx = self.value(*x);
                    let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            let grp = r / seq;
                            let c = counts[grp] as f64;
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(grp)) {
                                *o = v / c;
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * dot) / norms[r];
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let vx = self.value(*x);
                    accum(&mut grads, *x, g.reshaped(vx.rows(), vx.cols())?);
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let hw = geom.height * geom.width;
                    let ohw = geom.out_height() * geom.out_width();
                    let mut gcols = vec![0.0; geom.weight_cols() * hw];
                    let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                    let mut gw = Matrix::zeros(vw.rows(), vw.cols());
                    let mut gb = Matrix::zeros(1, geom.out_channels);
                    for n in 0..vx.rows() {
                        let go = g.row(n);
                        for co in 0..geom.out_channels {
                            gb.data_mut()[co] += go[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
                        }
                        im2col(go, &mut gcols, geom);
                        if self.needs(*w) {
                            gemm(
                                geom.in_channels,
                                hw,
                                geom.weight_cols(),
                                MatRef::new(vx.row(n), hw, 1),
                                MatRef::transposed(&gcols, hw),
                                gw.data_mut(),
                                geom.weight_cols(),
                                true,
                            );
                        }
                        if self.needs(*x) {
                            gemm(
                                geom.in_channels,
                                geom.weight_cols(),
                                hw,
                                MatRef::new(vw.data(), geom.weight_cols(), 1),
                                MatRef::new(&gcols, hw, 1),
                                gx.row_mut(n),
                                hw,
                                false,
                            );
                        }
                    }
                    if self.needs(*x) {
                        accum(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        accum(&mut grads, *w, gw);
                    }
                    if self.needs(*b) {
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::Loss { inputs, grads: local } => {
                    let up = g.data()[0];
                    for (&v, lg) in inputs.iter().zip(local) {
                        if self.needs(v) {
                            let mut gi = lg.clone();
                            gi.data_mut().iter_mut().for_each(|x| *x *= up);
                            accum(&mut grads, v, gi);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accum(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col2im(cols: &[f64], out: &mut [f64], geom: &ConvGeom) {
    let (h, w, k) = (geom.height, geom.width, geom.kernel);
    let (oh, ow) = (geom.out_height() as isize, geom.out_width() as isize);
    for co in 0..geom.out_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (co * k + ky) * k + kx;
                let src = &cols[r * h * w..(r + 1) * h * w];
                for iy in 0..h {
                    let oy = (iy * geom.stride + ky) as isize - geom.padding as isize;
                    if oy < 0 || oy >= oh {
                        continue;
                    }
                    let base = co * (oh * ow) as usize + oy as usize * ow as usize;
                    for ix in 0..w {
                        let ox = (ix * geom.stride + kx) as isize - geom.padding as isize;
                        if ox >= 0 && ox < ow {
                            out[base + ox as usize] += src[iy * w + ix];
                        }
                    }
                }
            }
        }
    }
}

fn im2col(gout: &[f64], cols: &mut [f64], geom: &ConvGeom) {
    let (h, w, k) = (geom.height, geom.width, geom.kernel);
    let (oh, ow) = (geom.out_height() as isize, geom.out_width() as isize);
    for co in 0..geom.out_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (co * k + ky) * k + kx;
                let dst = &mut cols[r * h * w..(r + 1) * h * w];
                for iy in 0..h {
                    let oy = (iy * geom.stride + ky) as isize - geom.padding as isize;
                    for ix in 0..w {
                        let ox = (ix * geom.stride + kx) as isize - geom.padding as isize;
                        dst[iy * w + ix] = if oy >= 0 && oy < oh && ox >= 0 && ox < ow {
                            gout[co * (oh * ow) as usize + (oy * ow + ox) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::params::Init;

    /// Central-difference check of every parameter entry against `backward`.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph<'_>) -> Var,
    {
        let grads = {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root).unwrap()
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let root = f(&mut g);
            g.scalar(root)
        };
        let h = 1e-5;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| {
                let v = store.get(id);
                Matrix::zeros(v.rows(), v.cols())
            });
            for i in 0..store.get(id).data().len() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = eval(store);
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = eval(store);
                store.get_mut(id).data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
                assert!(err < 1e-5, "{}[{i}]: analytic {a} vs fd {fd}", store.entry(id).name);
            }
        }
    }

    /// Weighted sum of all entries, so every output coordinate matters.
    fn probe(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
        let v = g.value(x).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Init::new(&mut rng).normal(v.rows(), v.cols(), 1.0);
        let value: f64 = v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        g.loss(value, &[x], vec![w]).unwrap()
    }

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.insert("t", n, init.normal(r, c, 0.7)).unwrap();
        }
        s
    }

    #[test]
    fn dense_ops_gradients() {
        let mut s = store_with(&[("x", 4, 3), ("w", 3, 5), ("b", 1, 5), ("g", 1, 5), ("c", 1, 5)], 1);
        check(&mut s, |g| {
            let ids: Vec<_> = (0..5).map(ParamId).collect();
            let x = g.param(ids[0]);
            let w = g.param(ids[1]);
            let b = g.param(ids[2]);
            let h = g.matmul(x, w).unwrap();
            let h = g.add_row(h, b).unwrap();
            let a = g.gelu(h);
            let gain = g.param(ids[3]);
            let bias = g.param(ids[4]);
            let n = g.layer_norm(a, gain, bias).unwrap();
            let s1 = g.sigmoid(n);
            let s2 = g.scale(s1, 1.7);
            let s3 = g.add(s2, h).unwrap();
            let s4 = g.l2_normalize(s3);
            probe(g, s4, 9)
        });
    }

    #[test]
    fn sequence_ops_gradients() {
        let mut s = store_with(&[("q", 6, 4), ("k", 6, 4), ("v", 6, 4), ("pos", 3, 4), ("e", 5, 4)], 2);
        let mask = [true, true, false, true, false, false];
        check(&mut s, |g| {
            let ids: Vec<_> = (0..5).map(ParamId).collect();
            let q = g.param(ids[0]);
            let k = g.param(ids[1]);
            let v = g.param(ids[2]);
            let pos = g.param(ids[3]);
            let e = g.param(ids[4]);
            let qp = g.add_tiled(q, pos).unwrap();
            let a = g.attention(qp, k, v, 2, 3, 2, Some(&mask)).unwrap();
            let emb = g.gather(&[e, a], vec![(0, 4), (1, 0), (0, 4), (1, 5), (0, 1), (1, 2)]).unwrap();
            let m = g.masked_mean(emb, 3, &mask).unwrap();
            let r = g.reshape(m, 4, 2).unwrap();
            probe(g, r, 10)
        });
    }

    #[test]
    fn conv_transpose_gradients_and_shape() {
        let geom = ConvGeom { in_channels: 2, height: 3, width: 2, out_channels: 3, kernel: 4, stride: 2, padding: 1 };
        assert_eq!((geom.out_height(), geom.out_width()), (6, 4));
        let mut s = store_with(&[("x", 2, 12), ("w", 2, 48), ("b", 1, 3)], 3);
        check(&mut s, |g| {
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let b = g.param(ParamId(2));
            let y = g.conv_transpose(x, w, b, geom).unwrap();
            probe(g, y, 11)
        });
    }

    #[test]
    fn conv_transpose_matches_direct_scatter() {
        let geom = ConvGeom { in_channels: 1, height: 2, width: 2, out_channels: 1, kernel: 4, stride: 2, padding: 1 };
        let s = store_with(&[("w", 1, 16)], 4);
        let mut g = Graph::new(&s);
        let x = g.input(Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.param(ParamId(0));
        let b = g.input(Matrix::zeros(1, 1));
        let y = g.conv_transpose(x, w, b, geom).unwrap();
        let wv = s.get(ParamId(0)).data();
        let mut expect = [0.0; 16];
        for iy in 0..2 {
            for ix in 0..2 {
                for ky in 0..4 {
                    for kx in 0..4 {
                        let oy = (iy * 2 + ky) as i32 - 1;
                        let ox = (ix * 2 + kx) as i32 - 1;
                        if (0..4).contains(&oy) && (0..4).contains(&ox) {
                            expect[(oy * 4 + ox) as usize] += [1.0, 2.0, 3.0, 4.0][iy * 2 + ix] * wv[ky * 4 + kx];
                        }
                    }
                }
            }
        }
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let mut s = ParamStore::new();
        let a = s.insert("enc", "w", Matrix::from_vec(1, 1, vec![2.0]).unwrap()).unwrap();
        let b = s.insert("dec", "w", Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::with_frozen(&s, &["enc"]);
        let va = g.param(a);
        let vb = g.param(b);
        let p = g.matmul(va, vb).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn fully_masked_sequence_is_rejected() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Matrix::zeros(2, 2));
        assert!(g.attention(x, x, x, 1, 2, 1, Some(&[false, false])).is_err());
        assert!(g.masked_mean(x, 2, &[false, false]).is_err());
    }
}
