//! Parameter bundles and forward functions for the transformer building blocks.

use super::graph::{Graph, Mask, Var};
use super::matrix::Scalar;
use super::params::{Init, ParamId, ParamStore, PROJ_STD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), fan_in, fan_out, Init::TruncNormal(PROJ_STD))?;
        let b = if bias { Some(store.add(&format!("{name}.b"), 1, fan_out, Init::Zeros)?) } else { None };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), 1, width, Init::Ones)?,
            bias: store.add(&format!("{name}.bias"), 1, width, Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), width, width, true)?,
            wk: Linear::new(store, &format!("{name}.k"), width, width, true)?,
            wv: Linear::new(store, &format!("{name}.v"), width, width, true)?,
            wo: Linear::new(store, &format!("{name}.o"), width, width, true)?,
            heads,
            width,
        })
    }

    /// Queries from `x`, keys and values from `ctx`.
    pub fn cross<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, ctx: Var, mask: Mask) -> Result<Var> {
        let (lq, dq) = g.shape(x);
        let (lk, dk) = g.shape(ctx);
        if dq != self.width || dk != self.width {
            return Err(Error::Shape(format!("attention width {} got inputs {dq} and {dk}", self.width)));
        }
        mask.validate(lq, lk)?;
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, ctx);
        let v = self.wv.forward(g, ctx);
        let a = g.attention(q, k, v, self.heads, mask);
        Ok(self.wo.forward(g, a))
    }
}

/// Self-attention over `inputs` (L×D) restricted by `mask`.
///
/// Output row `i` depends only on input rows `j` with `mask.allows(i, j)`.
pub fn attention_block<T: Scalar>(g: &mut Graph<'_, T>, inputs: Var, mask: Mask, params: &Attention) -> Result<Var> {
    params.cross(g, inputs, inputs, mask)
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            attn: Attention::new(store, &format!("{name}.attn"), width, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: &Mask) -> Result<Var> {
        let h = self.ln1.forward(g, x);
        let a = attention_block(g, h, mask.clone(), &self.attn)?;
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        Ok(g.add(x, m))
    }
}

/// Pre-norm layer with self-attention, cross-attention to a context, and MLP.
#[derive(Clone, Copy, Debug)]
pub struct CrossBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), width)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), width, heads)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), width)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), width, heads)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, ctx: Var) -> Result<Var> {
        let h = self.ln_self.forward(g, x);
        let a = attention_block(g, h, Mask::Full, &self.self_attn)?;
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, x);
        let c = self.cross_attn.cross(g, h, ctx, Mask::Full)?;
        let x = g.add(x, c);
        let h = self.ln_mlp.forward(g, x);
        let m = self.mlp.forward(g, h);
        Ok(g.add(x, m))
    }
}
