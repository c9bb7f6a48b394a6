//! Per-tap projectors `g_l` and the gated cross-attention blocks that inject
//! projected vision features into the language model.

use crate::autograd::{Component, Var};
use crate::error::{HiveError, Result};
use crate::nn::{multi_head_attention, AttnComponents, LayerNorm, Linear};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

/// Two-layer GELU MLP with a residual path from `d_v` to `d_l`.
#[derive(Clone, Debug)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
    /// `None` means identity (only when `d_v == d_l`).
    pub residual: Option<Linear>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Projector {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d_v: usize, d_l: usize) -> Result<Self> {
        let residual = if d_v != d_l {
            Some(Linear::new(store, init, &format!("{name}.residual"), d_v, d_l, false)?)
        } else {
            None
        };
        Ok(Projector {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d_v, d_l, true)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), d_l, d_l, true)?,
            residual,
            d_in: d_v,
            d_out: d_l,
        })
    }

    /// `fc2(gelu(fc1(x))) + residual(x)`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<Var> {
        let cols = ctx.tape.shape(features)[1];
        if cols != self.d_in {
            return Err(HiveError::Shape {
                op: "project",
                lhs: ctx.tape.shape(features).to_vec(),
                rhs: vec![self.d_in],
            });
        }
        let prev = ctx.tape.set_component(Component::Projector);
        let h = self.fc1.forward(ctx, features)?;
        let h = ctx.tape.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        let skip = match &self.residual {
            Some(lin) => lin.forward(ctx, features)?,
            None => features,
        };
        ctx.tape.set_component(prev);
        ctx.tape.add(h, skip)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v = self.fc1.names();
        v.extend(self.fc2.names());
        if let Some(r) = &self.residual {
            v.extend(r.names());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.residual.as_ref().map_or(0, Linear::param_count)
    }
}

/// Per-head `[N_t × N_kv]` attention weights from one cross-attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionWeights {
    pub n_queries: usize,
    pub n_keys: usize,
    pub heads: Vec<Vec<f64>>,
}

impl CrossAttentionWeights {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        &self.heads[head][query * self.n_keys..(query + 1) * self.n_keys]
    }

    /// Mean over heads of one query's weights.
    pub fn head_mean(&self, query: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_keys];
        for h in 0..self.heads.len() {
            for (o, w) in out.iter_mut().zip(self.row(h, query)) {
                *o += w;
            }
        }
        let n = self.heads.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// `h + gate · Wo(MHA(Wq·ln_q(h), Wk·ln_kv(v), Wv·ln_kv(v)))`, no causal mask.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub gate: String,
    pub heads: usize,
    pub d: usize,
}

impl CrossAttentionBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(HiveError::Config(format!(
                "cross-attention width {d} not divisible by {heads} heads"
            )));
        }
        let gate = format!("{name}.gate");
        store.insert(&gate, Tensor::zeros(&[1]))?;
        Ok(CrossAttentionBlock {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d)?,
            wq: Linear::new(store, init, &format!("{name}.wq"), d, d, true)?,
            wk: Linear::new(store, init, &format!("{name}.wk"), d, d, true)?,
            wv: Linear::new(store, init, &format!("{name}.wv"), d, d, true)?,
            wo: Linear::new(store, init, &format!("{name}.wo"), d, d, true)?,
            gate,
            heads,
            d,
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        llm_hidden: Var,
        vision_kv: Var,
        record: bool,
    ) -> Result<(Var, Option<CrossAttentionWeights>)> {
        let qs = ctx.tape.shape(llm_hidden).to_vec();
        let ks = ctx.tape.shape(vision_kv).to_vec();
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.d || ks[1] != self.d {
            return Err(HiveError::Shape {
                op: "cross_attend",
                lhs: qs,
                rhs: ks,
            });
        }
        let prev = ctx.tape.set_component(Component::Xattn);
        let hq = self.ln_q.forward(ctx, llm_hidden)?;
        let hkv = self.ln_kv.forward(ctx, vision_kv)?;
        let q = self.wq.forward(ctx, hq)?;
        let k = self.wk.forward(ctx, hkv)?;
        let v = self.wv.forward(ctx, hkv)?;
        let (o, weights) = multi_head_attention(
            ctx,
            q,
            k,
            v,
            self.heads,
            None,
            AttnComponents::uniform(Component::Xattn),
            record,
        )?;
        let o = self.wo.forward(ctx, o)?;
        let gate = ctx.param(&self.gate)?;
        let o = ctx.tape.scale_by(o, gate)?;
        let out = ctx.tape.add(llm_hidden, o)?;
        ctx.tape.set_component(prev);
        let weights = record.then(|| CrossAttentionWeights {
            n_queries: qs[0],
            n_keys: ks[0],
            heads: weights,
        });
        Ok((out, weights))
    }

    pub fn param_count(&self) -> usize {
        4 * self.d + self.wq.param_count() + self.wk.param_count() + self.wv.param_count() + self.wo.param_count() + 1
    }
}

/// One projector and one cross-attention block per selected pair.
#[derive(Clone, Debug, Default)]
pub struct Bridge {
    pub projectors: Vec<Projector>,
    pub xattn: Vec<CrossAttentionBlock>,
}

impl Bridge {
    pub fn project(&self, ctx: &mut Ctx<'_>, features: Var, rank: usize) -> Result<Var> {
        self.projectors
            .get(rank)
            .ok_or_else(|| HiveError::Lookup(format!("no projector for tap rank {rank}")))?
            .forward(ctx, features)
    }

    pub fn cross_attend(
        &self,
        ctx: &mut Ctx<'_>,
        llm_hidden: Var,
        vision_kv: Var,
        rank: usize,
        record: bool,
    ) -> Result<(Var, Option<CrossAttentionWeights>)> {
        self.xattn
            .get(rank)
            .ok_or_else(|| HiveError::Lookup(format!("no cross-attention block for tap rank {rank}")))?
            .forward(ctx, llm_hidden, vision_kv, record)
    }
}
