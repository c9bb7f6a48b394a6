//! Layers shared by the encoder, the bridge and the language model.

use crate::autograd::{Component, Var};
use crate::error::Result;
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W (+ b)` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = format!("{name}.w");
        store.insert(&weight, init.normal(&[d_in, d_out]))?;
        let bias = if bias {
            let b = format!("{name}.b");
            store.insert(&b, Tensor::zeros(&[d_out]))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let y = ctx.tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = ctx.param(b)?;
                ctx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.bias.as_ref().map_or(0, |_| self.d_out)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v = vec![self.weight.as_str()];
        v.extend(self.bias.as_deref());
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, Tensor::filled(&[d], 1.0))?;
        store.insert(&beta, Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma)?;
        let b = ctx.param(&self.beta)?;
        ctx.tape.layernorm(x, g, b, LN_EPS)
    }
}

/// Attribution of the four kinds of attention matmul.
#[derive(Clone, Copy, Debug)]
pub struct AttnComponents {
    pub proj: Component,
    pub qk: Component,
    pub av: Component,
}

impl AttnComponents {
    pub fn uniform(c: Component) -> Self {
        AttnComponents { proj: c, qk: c, av: c }
    }
}

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// `q` is `[Nq × d]`, `k` and `v` are `[Nk × d]`. Returns the concatenated
/// head outputs and, when `record` is set, each head's `[Nq × Nk]` weights.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    ctx: &mut Ctx<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    allowed: Option<&[bool]>,
    comps: AttnComponents,
    record: bool,
) -> Result<(Var, Vec<Vec<f64>>)> {
    let d = ctx.tape.shape(q)[1];
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::new();
    for h in 0..heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = ctx.tape.slice_cols(q, lo, hi)?;
        let kh = ctx.tape.slice_cols(k, lo, hi)?;
        let vh = ctx.tape.slice_cols(v, lo, hi)?;
        ctx.tape.set_component(comps.qk);
        let scores = ctx.tape.matmul_t(qh, kh)?;
        let scores = ctx.tape.scale(scores, scale);
        let attn = ctx.tape.softmax_rows(scores, allowed)?;
        if record {
            weights.push(ctx.tape.value(attn).to_vec());
        }
        ctx.tape.set_component(comps.av);
        outs.push(ctx.tape.matmul(attn, vh)?);
    }
    ctx.tape.set_component(comps.proj);
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        ctx.tape.concat_cols(&outs)?
    };
    Ok((out, weights))
}

/// Lower-triangular-inclusive mask: position `i` sees `j ≤ i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// Self-attention with separate q/k/v/out projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(SelfAttention {
            wq: Linear::new(store, init, &format!("{name}.wq"), d, d, true)?,
            wk: Linear::new(store, init, &format!("{name}.wk"), d, d, true)?,
            wv: Linear::new(store, init, &format!("{name}.wv"), d, d, true)?,
            wo: Linear::new(store, init, &format!("{name}.wo"), d, d, true)?,
            heads,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, allowed: Option<&[bool]>, comps: AttnComponents) -> Result<Var> {
        ctx.tape.set_component(comps.proj);
        let q = self.wq.forward(ctx, x)?;
        let k = self.wk.forward(ctx, x)?;
        let v = self.wv.forward(ctx, x)?;
        let (o, _) = multi_head_attention(ctx, q, k, v, self.heads, allowed, comps, false)?;
        ctx.tape.set_component(comps.proj);
        self.wo.forward(ctx, o)
    }
}

/// `d → 4d → d` GELU feed-forward.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_EXPANSION: usize = 4;

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, MLP_EXPANSION * d, true)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), MLP_EXPANSION * d, d, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Zeroes a linear layer's weight and bias in place.
pub fn zero_linear(store: &mut ParamStore, lin: &Linear) -> Result<()> {
    for n in lin.names() {
        store.get_mut(n)?.data_mut().fill(0.0);
    }
    Ok(())
}
