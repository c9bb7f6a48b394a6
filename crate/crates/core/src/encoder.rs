//! Patch-tokenizing vision transformer with hierarchical feature taps.

use std::fmt;

use crate::autograd::{Component, Var};
use crate::error::{HiveError, Result};
use crate::nn::{AttnComponents, LayerNorm, Linear, Mlp, SelfAttention};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub depth: usize,
    pub heads: usize,
    pub use_class_token: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch_size: 4,
            d_v: 64,
            depth: 8,
            heads: 4,
            use_class_token: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("d_v", self.d_v),
            ("depth", self.depth),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = pos.iter().find(|(_, v)| *v == 0) {
            return Err(HiveError::Config(format!("encoder.{name} must be positive")));
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return Err(HiveError::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if !self.d_v.is_multiple_of(self.heads) {
            return Err(HiveError::Config(format!(
                "encoder width {} is not divisible by {} heads",
                self.d_v, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    /// `N_v = H·W / P²`.
    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.use_class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Flattens an `[H×W×C]` image into `[N_v × P·P·C]` patch rows, row-major over
/// the patch grid and `(y, x, c)` within a patch.
pub fn extract_patches(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    cfg.validate()?;
    let expect = [cfg.image_h, cfg.image_w, cfg.channels];
    if image.shape() != expect {
        return Err(HiveError::Shape {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let p = cfg.patch_size;
    let (gh, gw) = cfg.grid();
    let c = cfg.channels;
    let px = image.data();
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    let off = ((pr * p + y) * cfg.image_w + pc * p + x) * c;
                    out.extend_from_slice(&px[off..off + c]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.n_patches(), cfg.patch_dim()], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Evenly spaced, anchored at the deepest layer.
    Uniform,
    /// The last `L_s` layers.
    Tail,
    /// Only the final layer (cascaded baseline).
    FinalOnly,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Strategy::Uniform),
            "tail" => Some(Strategy::Tail),
            "final-only" | "final_only" | "cascaded" => Some(Strategy::FinalOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::Tail => "tail",
            Strategy::FinalOnly => "final-only",
        })
    }
}

/// Ordered `(encoder_layer, llm_layer)` pairs, both 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSelection {
    pub density: f64,
    pub strategy: Strategy,
    pub pairs: Vec<(usize, usize)>,
}

impl LayerSelection {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn encoder_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn llm_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Rank of the tap injected at `llm_layer`, if any.
    pub fn rank_for_llm_layer(&self, llm_layer: usize) -> Option<usize> {
        self.pairs.iter().position(|p| p.1 == llm_layer)
    }

    pub fn validate(&self, l_v: usize, l_l: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(HiveError::Selection("no pairs".into()));
        }
        for w in self.pairs.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(HiveError::Selection(format!(
                    "pairs must be strictly increasing, got {:?}",
                    self.pairs
                )));
            }
        }
        for &(e, l) in &self.pairs {
            if e == 0 || e > l_v || l == 0 || l > l_l {
                return Err(HiveError::Selection(format!(
                    "pair ({e}, {l}) out of range for L_v={l_v}, L_l={l_l}"
                )));
            }
        }
        if self.strategy == Strategy::FinalOnly && (self.pairs.len() != 1 || self.pairs[0].0 != l_v) {
            return Err(HiveError::Selection(
                "final-only selection must be the single final layer".into(),
            ));
        }
        Ok(())
    }

    /// `pairs` rendered as `e:l,e:l`.
    pub fn pairs_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(e, l)| format!("{e}:{l}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// `round(num / den)` with halves rounded up, on exact integers.
fn round_ratio(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Number of taps for a density: `max(1, round_half_up(ρ·L_v))`.
pub fn tap_count(l_v: usize, density: f64) -> usize {
    ((density * l_v as f64 + 0.5).floor() as usize).max(1)
}

pub fn select_layers(l_v: usize, l_l: usize, density: f64, strategy: Strategy) -> Result<LayerSelection> {
    if l_v == 0 || l_l == 0 {
        return Err(HiveError::Selection("depths must be at least 1".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(HiveError::Selection(format!("density {density} outside (0, 1]")));
    }
    let l_s = match strategy {
        Strategy::FinalOnly => 1,
        _ => tap_count(l_v, density),
    };
    let encoder: Vec<usize> = match strategy {
        Strategy::Uniform => (1..=l_s).map(|i| round_ratio(i * l_v, l_s).clamp(1, l_v)).collect(),
        Strategy::Tail => (l_v + 1 - l_s..=l_v).collect(),
        Strategy::FinalOnly => vec![l_v],
    };
    let llm: Vec<usize> = (1..=l_s).map(|k| round_ratio(k * l_l, l_s).clamp(1, l_l)).collect();

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(l_s);
    for (e, l) in encoder.into_iter().zip(llm) {
        if pairs.last().is_some_and(|&(pe, pl)| pe == e || pl == l) {
            continue;
        }
        pairs.push((e, l));
    }
    if pairs.len() < l_s {
        return Err(HiveError::Selection(format!(
            "{l_s} taps requested but only {} distinct (encoder, llm) pairs exist for L_v={l_v}, L_l={l_l}",
            pairs.len()
        )));
    }
    Ok(LayerSelection {
        density,
        strategy,
        pairs,
    })
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    /// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let comps = AttnComponents::uniform(Component::Encoder);
        ctx.tape.set_component(Component::Encoder);
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, None, comps)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        ctx.tape.set_component(Component::Encoder);
        let m = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }
}

/// Tokens entering the first block: `T_v` plus positions (and class token).
#[derive(Clone, Copy, Debug)]
pub struct VisualTokens {
    pub tokens: Var,
    pub n_patches: usize,
    pub has_class_token: bool,
}

/// `F_0 … F_L` on the tape, plus the tapped subset in rank order.
#[derive(Clone, Debug)]
pub struct HierarchicalFeatures {
    pub layers: Vec<Var>,
    pub taps: Vec<(usize, Var)>,
}

impl HierarchicalFeatures {
    pub fn final_layer(&self) -> Var {
        *self.layers.last().unwrap()
    }

    pub fn layer(&self, l: usize) -> Option<Var> {
        self.layers.get(l).copied()
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub patch: Linear,
    pub pos: String,
    pub cls: Option<String>,
    pub blocks: Vec<EncoderBlock>,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch = Linear::new(store, init, "encoder.patch", cfg.patch_dim(), cfg.d_v, true)?;
        let pos = "encoder.pos".to_string();
        store.insert(&pos, init.normal(&[cfg.n_patches(), cfg.d_v]))?;
        let cls = if cfg.use_class_token {
            let name = "encoder.cls".to_string();
            store.insert(&name, init.normal(&[1, cfg.d_v]))?;
            Some(name)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let base = format!("encoder.blocks.{i}");
            blocks.push(EncoderBlock {
                ln1: LayerNorm::new(store, &format!("{base}.ln1"), cfg.d_v)?,
                attn: SelfAttention::new(store, init, &format!("{base}.attn"), cfg.d_v, cfg.heads)?,
                ln2: LayerNorm::new(store, &format!("{base}.ln2"), cfg.d_v)?,
                mlp: Mlp::new(store, init, &format!("{base}.mlp"), cfg.d_v)?,
            });
        }
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch,
            pos,
            cls,
            blocks,
        })
    }

    /// Image → projected patch tokens plus positional embedding.
    pub fn patchify(&self, ctx: &mut Ctx<'_>, image: &Tensor) -> Result<VisualTokens> {
        let patches = extract_patches(image, &self.cfg)?;
        let x = ctx.tape.constant(&patches);
        ctx.tape.set_component(Component::Embed);
        let t = self.patch.forward(ctx, x)?;
        let pos = ctx.param(&self.pos)?;
        let mut tokens = ctx.tape.add(t, pos)?;
        if let Some(cls) = &self.cls {
            let c = ctx.param(cls)?;
            tokens = ctx.tape.concat_rows(&[c, tokens])?;
        }
        Ok(VisualTokens {
            tokens,
            n_patches: self.cfg.n_patches(),
            has_class_token: self.cls.is_some(),
        })
    }

    /// Applies block `l` (1-based) to `F_{l-1}`.
    pub fn block_forward(&self, ctx: &mut Ctx<'_>, l: usize, prev: Var) -> Result<Var> {
        let block = self
            .blocks
            .get(l.wrapping_sub(1))
            .ok_or_else(|| HiveError::Lookup(format!("encoder layer {l} out of range")))?;
        block.forward(ctx, prev)
    }

    /// Runs every block, keeping `F_l` for all depths and exposing the selected taps.
    ///
    /// With `stop_grad_above = Some(k)`, the input to block `k+1` is detached
    /// from `F_k`, so gradients cannot flow below layer `k` through the stack.
    pub fn encode_hierarchical(
        &self,
        ctx: &mut Ctx<'_>,
        tokens: &VisualTokens,
        tap_layers: &[usize],
        stop_grad_above: Option<usize>,
    ) -> Result<HierarchicalFeatures> {
        if let Some(&bad) = tap_layers.iter().find(|&&l| l == 0 || l > self.cfg.depth) {
            return Err(HiveError::Selection(format!(
                "tap layer {bad} outside 1..={}",
                self.cfg.depth
            )));
        }
        let mut layers = Vec::with_capacity(self.cfg.depth + 1);
        layers.push(tokens.tokens);
        for l in 1..=self.cfg.depth {
            let mut input = layers[l - 1];
            if stop_grad_above == Some(l - 1) {
                input = ctx.tape.detach(input);
            }
            let out = self.block_forward(ctx, l, input)?;
            layers.push(out);
        }
        let taps = tap_layers.iter().map(|&l| (l, layers[l])).collect();
        Ok(HierarchicalFeatures { layers, taps })
    }
}
