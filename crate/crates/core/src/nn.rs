//! Layer building blocks on top of the autodiff graph.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        group: &str,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.insert(group, &format!("{name}.weight"), init.xavier(fan_in, fan_out))?;
        let bias = store.insert(group, &format!("{name}.bias"), Matrix::zeros(1, fan_out))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: &str, name: &str, width: usize) -> Result<Self> {
        let ones = Matrix::from_vec(1, width, vec![1.0; width])?;
        let gain = store.insert(group, &format!("{name}.gain"), ones)?;
        let bias = store.insert(group, &format!("{name}.bias"), Matrix::zeros(1, width))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Shape of a stack of pre-norm self-attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

/// Pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        group: &str,
        name: &str,
        shape: BlockShape,
    ) -> Result<Self> {
        let w = shape.width;
        let hidden = w * shape.mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::new(store, group, &format!("{name}.ln1"), w)?,
            query: Linear::new(store, init, group, &format!("{name}.query"), w, w)?,
            key: Linear::new(store, init, group, &format!("{name}.key"), w, w)?,
            value: Linear::new(store, init, group, &format!("{name}.value"), w, w)?,
            out: Linear::new(store, init, group, &format!("{name}.out"), w, w)?,
            ln2: LayerNorm::new(store, group, &format!("{name}.ln2"), w)?,
            fc1: Linear::new(store, init, group, &format!("{name}.fc1"), w, hidden)?,
            fc2: Linear::new(store, init, group, &format!("{name}.fc2"), hidden, w)?,
            heads: shape.heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        batch: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let a = g.attention(q, k, v, batch, seq, self.heads, key_mask)?;
        let a = self.out.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

pub fn transformer_stack(
    store: &mut ParamStore,
    init: &mut Init<'_>,
    group: &str,
    depth: usize,
    shape: BlockShape,
) -> Result<Vec<TransformerBlock>> {
    (0..depth).map(|i| TransformerBlock::new(store, init, group, &format!("block{i}"), shape)).collect()
}

/// Transposed-convolution layer; weight laid out `C_in × (C_out·k·k)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, group: &str, name: &str, geom: ConvGeom) -> Result<Self> {
        let k2 = geom.kernel * geom.kernel;
        // Each output pixel receives roughly C_in·k²/stride² contributions.
        let fan = (geom.in_channels * k2 / (geom.stride * geom.stride)).max(1);
        let std = (1.0 / fan as f64).sqrt();
        let weight = store.insert(
            group,
            &format!("{name}.weight"),
            init.normal(geom.in_channels, geom.out_channels * k2, std),
        )?;
        let bias = store.insert(group, &format!("{name}.bias"), Matrix::zeros(1, geom.out_channels))?;
        Ok(Self { weight, bias, geom })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose(x, w, b, self.geom)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
