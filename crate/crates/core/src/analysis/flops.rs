//! Multiply-accumulate accounting: analytic complexity formulas, an exact
//! closed form of this architecture, and instrumented counts from a forward.
//!
//! Counting convention: one MAC per scalar multiply-add inside a matmul.
//! Softmax, normalization, activations, additions and embedding lookups are
//! not counted. The analytic formulas use `c_mlp = 8` (a `d → 4d → d` MLP is
//! `8·d²` per token) and `c_x = 4` (q, k, v and output projections).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Component;
use crate::error::{HiveError, Result};
use crate::model::{Arch, ForwardOptions, HiveModel, Mode, ModelConfig};
use crate::nn::MLP_EXPANSION;
use crate::tensor::Tensor;

pub const C_MLP: f64 = 8.0;
pub const C_X: f64 = 4.0;

pub const CONVENTION: &str = "1 MAC per scalar multiply-add in matmuls only; softmax, norms, \
activations, additions and embedding lookups excluded; analytic constants c_mlp = 8, c_x = 4";

/// Dimensions the analytic formulas are evaluated at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopDims {
    pub l_l: usize,
    pub l_s: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d: usize,
}

/// `L_l·(N²·d/2 + c_mlp·N·d²)` with `N = N_v + N_t`.
pub fn analytic_self_attn(dims: &FlopDims) -> f64 {
    let n = (dims.n_v + dims.n_t) as f64;
    let d = dims.d as f64;
    dims.l_l as f64 * (n * n * d / 2.0 + C_MLP * n * d * d)
}

/// `L_l·L_s·c_x·d² + L_l·N_t·c_mlp·d²`.
pub fn analytic_cross_attn(dims: &FlopDims) -> f64 {
    let (l_l, l_s, n_t, d) = (dims.l_l as f64, dims.l_s as f64, dims.n_t as f64, dims.d as f64);
    l_l * l_s * C_X * d * d + l_l * n_t * C_MLP * d * d
}

fn add(out: &mut BTreeMap<Component, u64>, c: Component, v: usize) {
    if v > 0 {
        *out.entry(c).or_insert(0) += v as u64;
    }
}

/// Exact MACs of one forward of `cfg` in `mode` over `n_t` text tokens.
///
/// Per LLM layer over a sequence of `N` rows: `qk = av = N²·d`,
/// `proj = 4·N·d²`, `mlp = 2·e·N·d²`; head `N·d·V`. Encoder blocks follow the
/// same pattern at `d_v` over `N_e = N_v (+1 class token)` rows, patch embedding
/// is `N_v·P²C·d_v`. Each tap adds a projector `N_e·(d_v·d + d² [+ d_v·d])` and,
/// in hierarchical mode, a cross-attention `2·N_t·d² + 2·N_e·d² + 2·N_t·N_e·d`.
pub fn closed_form_macs(cfg: &ModelConfig, mode: Mode, n_t: usize) -> BTreeMap<Component, u64> {
    let mut out = BTreeMap::new();
    let e = MLP_EXPANSION;
    let d = cfg.lm.d_l;
    let d_v = cfg.encoder.d_v;
    let n_e = cfg.encoder.n_tokens();
    let mut n = n_t;
    if mode != Mode::Plain {
        add(
            &mut out,
            Component::Embed,
            cfg.encoder.n_patches() * cfg.encoder.patch_dim() * d_v,
        );
        let block = 4 * n_e * d_v * d_v + 2 * n_e * n_e * d_v + 2 * e * n_e * d_v * d_v;
        add(&mut out, Component::Encoder, cfg.encoder.depth * block);
        let residual = if d_v != d { d_v * d } else { 0 };
        let projector = n_e * (d_v * d + d * d + residual);
        match mode {
            Mode::Hierarchical => {
                let l_s = cfg.selection.len();
                add(&mut out, Component::Projector, l_s * projector);
                add(
                    &mut out,
                    Component::Xattn,
                    l_s * (2 * n_t * d * d + 2 * n_e * d * d + 2 * n_t * n_e * d),
                );
            }
            Mode::Concat => {
                add(&mut out, Component::Projector, projector);
                n = n_e + n_t;
            }
            Mode::Plain => {}
        }
    }
    let l_l = cfg.lm.depth;
    add(&mut out, Component::Qk, l_l * n * n * d);
    add(&mut out, Component::Av, l_l * n * n * d);
    add(&mut out, Component::Proj, l_l * 4 * n * d * d);
    add(&mut out, Component::Mlp, l_l * 2 * e * n * d * d);
    add(&mut out, Component::Head, n * d * cfg.lm.vocab_size);
    out
}

/// Instrumented MACs of one forward (no loss) over `ids`.
pub fn measured_flops(
    model: &HiveModel,
    image: Option<&Tensor>,
    ids: &[usize],
    mode: Mode,
) -> Result<BTreeMap<Component, u64>> {
    let mut ctx = model.ctx();
    let opts = ForwardOptions::default();
    let vision = model.encode_vision(&mut ctx, image, mode, opts)?;
    model.decode(&mut ctx, ids, &vision, opts)?;
    Ok(ctx.tape.macs().clone())
}

/// Sum of the LLM-internal components (qk, av, proj, mlp, head).
pub fn llm_internal(macs: &BTreeMap<Component, u64>) -> u64 {
    macs.iter().filter(|(c, _)| c.is_llm_internal()).map(|(_, v)| v).sum()
}

pub fn total(macs: &BTreeMap<Component, u64>) -> u64 {
    macs.values().sum()
}

fn named(macs: &BTreeMap<Component, u64>) -> BTreeMap<String, u64> {
    macs.iter().map(|(c, v)| (c.name().to_string(), *v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub l_v: usize,
    pub l_l: usize,
    pub l_s: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d: usize,
    pub d_v: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub pairs: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    pub mode: String,
    pub config: ConfigEcho,
    pub analytic_self_attn: f64,
    pub analytic_cross_attn: f64,
    pub closed_form: BTreeMap<String, u64>,
    pub measured: BTreeMap<String, u64>,
    pub measured_total: u64,
    pub measured_llm_internal: u64,
}

impl FlopReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Measures `model` in its native mode on a blank image and `n_t` text tokens.
pub fn flop_report(model: &HiveModel, n_t: usize) -> Result<FlopReport> {
    let cfg = &model.cfg;
    if n_t == 0 || n_t > cfg.lm.max_seq {
        return Err(HiveError::Request(format!(
            "n_t = {n_t} outside 1..={}",
            cfg.lm.max_seq
        )));
    }
    let mode = model.native_mode();
    let e = &cfg.encoder;
    let image = Tensor::zeros(&[e.image_h, e.image_w, e.channels]);
    let ids: Vec<usize> = (0..n_t).map(|i| i % cfg.lm.vocab_size).collect();
    let measured = measured_flops(model, Some(&image), &ids, mode)?;
    let dims = FlopDims {
        l_l: cfg.lm.depth,
        l_s: cfg.selection.len(),
        n_v: e.n_tokens(),
        n_t,
        d: cfg.lm.d_l,
    };
    Ok(FlopReport {
        convention: CONVENTION.to_string(),
        mode: match cfg.arch {
            Arch::Hierarchical => "hier".to_string(),
            Arch::Concat { .. } => "sa".to_string(),
        },
        config: ConfigEcho {
            l_v: e.depth,
            l_l: dims.l_l,
            l_s: dims.l_s,
            n_v: dims.n_v,
            n_t,
            d: dims.d,
            d_v: e.d_v,
            heads: cfg.lm.heads,
            vocab_size: cfg.lm.vocab_size,
            pairs: cfg.selection.pairs_text(),
        },
        analytic_self_attn: analytic_self_attn(&dims),
        analytic_cross_attn: analytic_cross_attn(&dims),
        closed_form: named(&closed_form_macs(cfg, mode, n_t)),
        measured_total: total(&measured),
        measured_llm_internal: llm_internal(&measured),
        measured: named(&measured),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n_v: usize, n_t: usize) -> FlopDims {
        FlopDims {
            l_l: 32,
            l_s: 6,
            n_v,
            n_t,
            d: 4096,
        }
    }

    #[test]
    fn text_only_mlp_terms_agree() {
        let d = FlopDims {
            l_l: 4,
            l_s: 0,
            n_v: 0,
            n_t: 16,
            d: 64,
        };
        let self_mlp = analytic_self_attn(&d) - 4.0 * 16.0 * 16.0 * 64.0 / 2.0;
        assert_eq!(self_mlp, analytic_cross_attn(&d));
    }

    #[test]
    fn doubling_vision_quadruples_quadratic_term() {
        let quad = |n_v: usize| 32.0 * (n_v as f64).powi(2) * 4096.0 / 2.0;
        let ratio = quad(1152) / quad(576);
        assert_eq!(ratio, 4.0);
        let base = dims(576, 0);
        let big = dims(1152, 0);
        let q = |d: &FlopDims| analytic_self_attn(d) - 32.0 * C_MLP * d.n_v as f64 * 4096.0 * 4096.0;
        assert_eq!(q(&big) / q(&base), 4.0);
    }

    #[test]
    fn cross_to_self_ratio_falls_with_vision_tokens() {
        let mut prev = f64::INFINITY;
        for n_v in [64, 144, 256, 576, 1024, 2304] {
            let d = dims(n_v, 64);
            let r = analytic_cross_attn(&d) / analytic_self_attn(&d);
            assert!(r < 1.0 && r < prev, "n_v={n_v} ratio {r}");
            prev = r;
        }
    }
}
