//! The composed vision–language model and its three operating modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Var, IGNORE_INDEX};
use crate::bridge::{Bridge, CrossAttentionBlock, CrossAttentionWeights, Projector};
use crate::encoder::{EncoderConfig, HierarchicalFeatures, LayerSelection, VisionEncoder};
use crate::error::{HiveError, Result};
use crate::lm::{LMConfig, LanguageModel, TokenSequence};
use crate::nn::{causal_mask, Linear};
use crate::params::{Ctx, Init, ParamGroup, ParamStore};
use crate::tensor::{Precision, Tensor};

/// Which vision pathway the parameters are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// One projector and one cross-attention block per selected pair.
    Hierarchical,
    /// A single projector on encoder layer `tap`, prepended as prefix tokens.
    Concat { tap: usize },
}

/// How a forward pass routes vision into the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Plain,
    Hierarchical,
    Concat,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(Mode::Plain),
            "hierarchical" | "hier" => Some(Mode::Hierarchical),
            "concat" | "sa" => Some(Mode::Concat),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Hierarchical => "hierarchical",
            Mode::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LMConfig,
    pub selection: LayerSelection,
    pub arch: Arch,
    pub num_classes: Option<usize>,
    pub precision: Precision,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        self.selection.validate(self.encoder.depth, self.lm.depth)?;
        if let Arch::Concat { tap } = self.arch {
            if tap == 0 || tap > self.encoder.depth {
                return Err(HiveError::Config(format!("concat tap {tap} outside encoder depth")));
            }
        }
        if self.num_classes == Some(0) {
            return Err(HiveError::Config("num_classes must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(HiveError::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub record_attention: bool,
    /// Detach the encoder stack above this layer (see `encode_hierarchical`).
    pub stop_grad_above: Option<usize>,
}

/// Vision side of one forward pass, ready to be consumed by the decoder.
#[derive(Clone, Debug)]
pub enum VisionContext {
    None,
    Hierarchical {
        features: HierarchicalFeatures,
        kv: Vec<Var>,
    },
    Concat {
        features: HierarchicalFeatures,
        prefix: Var,
    },
}

impl VisionContext {
    pub fn features(&self) -> Option<&HierarchicalFeatures> {
        match self {
            VisionContext::None => None,
            VisionContext::Hierarchical { features, .. } | VisionContext::Concat { features, .. } => Some(features),
        }
    }

    fn prefix_len(&self, ctx: &Ctx<'_>) -> usize {
        match self {
            VisionContext::Concat { prefix, .. } => ctx.tape.shape(*prefix)[0],
            _ => 0,
        }
    }
}

/// Recorded cross-attention weights of one injection.
#[derive(Clone, Debug)]
pub struct InjectionWeights {
    pub rank: usize,
    pub llm_layer: usize,
    pub encoder_layer: usize,
    pub weights: CrossAttentionWeights,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[(prefix + N_t) × V]`.
    pub logits: Var,
    /// Targets aligned with `logits` rows; prefix rows are ignored.
    pub targets: Vec<usize>,
    pub prefix_len: usize,
    pub vision: VisionContext,
    pub attention: Vec<InjectionWeights>,
}

#[derive(Clone, Debug)]
pub struct HiveModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: VisionEncoder,
    pub bridge: Bridge,
    pub lm: LanguageModel,
    pub classifier: Option<Linear>,
}

impl HiveModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(cfg.precision);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init {
            rng: &mut rng,
            std: cfg.init_std,
        };
        let encoder = VisionEncoder::new(&mut params, &mut init, &cfg.encoder)?;
        let lm = LanguageModel::new(&mut params, &mut init, &cfg.lm)?;
        let (d_v, d_l) = (cfg.encoder.d_v, cfg.lm.d_l);
        let mut bridge = Bridge::default();
        match cfg.arch {
            Arch::Hierarchical => {
                for rank in 0..cfg.selection.len() {
                    bridge.projectors.push(Projector::new(
                        &mut params,
                        &mut init,
                        &format!("projector.{rank}"),
                        d_v,
                        d_l,
                    )?);
                    bridge.xattn.push(CrossAttentionBlock::new(
                        &mut params,
                        &mut init,
                        &format!("xattn.{rank}"),
                        d_l,
                        cfg.lm.heads,
                    )?);
                }
            }
            Arch::Concat { .. } => {
                bridge
                    .projectors
                    .push(Projector::new(&mut params, &mut init, "projector.0", d_v, d_l)?);
            }
        }
        let classifier = match cfg.num_classes {
            Some(c) => Some(Linear::new(&mut params, &mut init, "classifier.head", d_v, c, true)?),
            None => None,
        };
        Ok(HiveModel {
            cfg,
            params,
            encoder,
            bridge,
            lm,
            classifier,
        })
    }

    /// The mode this architecture is trained in.
    pub fn native_mode(&self) -> Mode {
        match self.cfg.arch {
            Arch::Hierarchical => Mode::Hierarchical,
            Arch::Concat { .. } => Mode::Concat,
        }
    }

    pub fn ctx(&self) -> Ctx<'_> {
        Ctx::new(&self.params)
    }

    fn check_wiring(&self, mode: Mode) -> Result<()> {
        match (mode, self.cfg.arch) {
            (Mode::Plain, _) => Ok(()),
            (Mode::Hierarchical, Arch::Hierarchical) => {
                let n = self.cfg.selection.len();
                if self.bridge.projectors.len() != n || self.bridge.xattn.len() != n {
                    return Err(HiveError::Wiring(format!(
                        "{n} selected pairs but {} projectors and {} cross-attention blocks",
                        self.bridge.projectors.len(),
                        self.bridge.xattn.len()
                    )));
                }
                Ok(())
            }
            (Mode::Concat, Arch::Concat { .. }) => {
                if self.bridge.projectors.len() != 1 {
                    return Err(HiveError::Wiring("concat mode needs exactly one projector".into()));
                }
                Ok(())
            }
            (m, a) => Err(HiveError::Wiring(format!("{} mode on a {a:?} model", m.name()))),
        }
    }

    /// Encodes the image and projects whatever the mode consumes.
    pub fn encode_vision(
        &self,
        ctx: &mut Ctx<'_>,
        image: Option<&Tensor>,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<VisionContext> {
        self.check_wiring(mode)?;
        if mode == Mode::Plain {
            return Ok(VisionContext::None);
        }
        let image = image.ok_or_else(|| HiveError::Wiring(format!("{} mode needs an image", mode.name())))?;
        let tokens = self.encoder.patchify(ctx, image)?;
        match mode {
            Mode::Hierarchical => {
                let taps = self.cfg.selection.encoder_layers();
                let features = self
                    .encoder
                    .encode_hierarchical(ctx, &tokens, &taps, opts.stop_grad_above)?;
                if features.taps.len() != self.bridge.xattn.len() {
                    return Err(HiveError::Wiring(format!(
                        "{} taps for {} injections",
                        features.taps.len(),
                        self.bridge.xattn.len()
                    )));
                }
                let mut kv = Vec::with_capacity(features.taps.len());
                for (rank, &(_, f)) in features.taps.iter().enumerate() {
                    kv.push(self.bridge.project(ctx, f, rank)?);
                }
                Ok(VisionContext::Hierarchical { features, kv })
            }
            Mode::Concat => {
                let Arch::Concat { tap } = self.cfg.arch else {
                    unreachable!()
                };
                let features = self
                    .encoder
                    .encode_hierarchical(ctx, &tokens, &[tap], opts.stop_grad_above)?;
                let prefix = self.bridge.project(ctx, features.taps[0].1, 0)?;
                Ok(VisionContext::Concat { features, prefix })
            }
            Mode::Plain => unreachable!(),
        }
    }

    /// Runs the decoder over `ids` given a prepared vision context.
    pub fn decode(
        &self,
        ctx: &mut Ctx<'_>,
        ids: &[usize],
        vision: &VisionContext,
        opts: ForwardOptions,
    ) -> Result<(Var, Vec<InjectionWeights>)> {
        let mut attention = Vec::new();
        match vision {
            VisionContext::None => Ok((self.lm.forward_text(ctx, ids)?, attention)),
            VisionContext::Hierarchical { kv, .. } => {
                let sel = &self.cfg.selection;
                let mut x = self.lm.embed(ctx, ids)?;
                let mask = causal_mask(ids.len());
                for l in 1..=self.lm.cfg.depth {
                    x = self.lm.attn_residual(ctx, l, x, &mask)?;
                    if let Some(rank) = sel.rank_for_llm_layer(l) {
                        let (y, w) = self
                            .bridge
                            .cross_attend(ctx, x, kv[rank], rank, opts.record_attention)?;
                        x = y;
                        if let Some(weights) = w {
                            attention.push(InjectionWeights {
                                rank,
                                llm_layer: l,
                                encoder_layer: sel.pairs[rank].0,
                                weights,
                            });
                        }
                    }
                    x = self.lm.mlp_residual(ctx, l, x)?;
                }
                Ok((self.lm.logits(ctx, x)?, attention))
            }
            VisionContext::Concat { prefix, .. } => {
                let text = self.lm.embed(ctx, ids)?;
                let mut x = ctx.tape.concat_rows(&[*prefix, text])?;
                let n = ctx.tape.shape(x)[0];
                let mask = causal_mask(n);
                for l in 1..=self.lm.cfg.depth {
                    x = self.lm.attn_residual(ctx, l, x, &mask)?;
                    x = self.lm.mlp_residual(ctx, l, x)?;
                }
                Ok((self.lm.logits(ctx, x)?, attention))
            }
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        image: Option<&Tensor>,
        seq: &TokenSequence,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let vision = self.encode_vision(ctx, image, mode, opts)?;
        let (logits, attention) = self.decode(ctx, &seq.ids, &vision, opts)?;
        let prefix_len = vision.prefix_len(ctx);
        let mut targets = vec![IGNORE_INDEX; prefix_len];
        targets.extend_from_slice(&seq.targets);
        Ok(ForwardOutput {
            logits,
            targets,
            prefix_len,
            vision,
            attention,
        })
    }

    /// Mean next-token cross entropy over supervised text positions.
    pub fn loss(&self, ctx: &mut Ctx<'_>, image: Option<&Tensor>, seq: &TokenSequence, mode: Mode) -> Result<Var> {
        let out = self.forward(ctx, image, seq, mode, ForwardOptions::default())?;
        ctx.tape.cross_entropy(out.logits, &out.targets, IGNORE_INDEX)
    }

    /// Greedy decoding; ties go to the lowest id. Stops early at `eos`.
    pub fn generate_greedy(
        &self,
        image: Option<&Tensor>,
        prompt: &[usize],
        mode: Mode,
        max_new: usize,
        eos: Option<usize>,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(HiveError::Data("prompt must be nonempty".into()));
        }
        if prompt.len() + max_new > self.lm.cfg.max_seq {
            return Err(HiveError::Truncation {
                len: prompt.len() + max_new,
                max_seq: self.lm.cfg.max_seq,
            });
        }
        let mut ids = prompt.to_vec();
        if max_new == 0 {
            return Ok(ids);
        }
        let mut ctx = self.ctx();
        let vision = self.encode_vision(&mut ctx, image, mode, ForwardOptions::default())?;
        let vocab = self.lm.cfg.vocab_size;
        for _ in 0..max_new {
            let (logits, _) = self.decode(&mut ctx, &ids, &vision, ForwardOptions::default())?;
            let v = ctx.tape.value(logits);
            let last = &v[v.len() - vocab..];
            let next = argmax_lowest(last);
            ids.push(next);
            if Some(next) == eos {
                break;
            }
        }
        Ok(ids)
    }

    /// Pooled final-layer encoder features through the linear head, `[1 × C]`.
    pub fn classify(&self, ctx: &mut Ctx<'_>, image: &Tensor) -> Result<Var> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| HiveError::Wiring("model has no classifier head".into()))?;
        let pooled = self.pooled_features(ctx, image)?;
        ctx.tape.set_component(crate::autograd::Component::Classifier);
        head.forward(ctx, pooled)
    }

    /// Head logits for precomputed `[1 × d_v]` pooled features.
    pub fn classify_pooled(&self, ctx: &mut Ctx<'_>, pooled: &Tensor) -> Result<Var> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| HiveError::Wiring("model has no classifier head".into()))?;
        let x = ctx.tape.constant(pooled);
        ctx.tape.set_component(crate::autograd::Component::Classifier);
        head.forward(ctx, x)
    }

    /// Class-token row when present, otherwise the mean over patch tokens.
    pub fn pooled_features(&self, ctx: &mut Ctx<'_>, image: &Tensor) -> Result<Var> {
        let tokens = self.encoder.patchify(ctx, image)?;
        let feats = self.encoder.encode_hierarchical(ctx, &tokens, &[], None)?;
        let last = feats.final_layer();
        if tokens.has_class_token {
            ctx.tape.slice_rows(last, 0, 1)
        } else {
            ctx.tape.mean_rows(last)
        }
    }

    /// Copy with a fresh classifier head of `num_classes` outputs.
    pub fn with_classifier(&self, num_classes: usize) -> Result<HiveModel> {
        let mut cfg = self.cfg.clone();
        cfg.num_classes = Some(num_classes);
        let mut out = HiveModel::new(cfg)?;
        out.copy_groups_from(
            self,
            &[
                ParamGroup::Encoder,
                ParamGroup::Projector,
                ParamGroup::BridgeXattn,
                ParamGroup::Llm,
            ],
        )?;
        Ok(out)
    }

    /// Concat-mode copy for downstream fine-tuning: encoder and LLM carried over,
    /// connector initialized from the projector of the final-layer tap when one exists.
    pub fn to_concat(&self) -> Result<HiveModel> {
        let tap = self.cfg.encoder.depth;
        let mut cfg = self.cfg.clone();
        cfg.arch = Arch::Concat { tap };
        cfg.num_classes = None;
        let mut out = HiveModel::new(cfg)?;
        out.copy_groups_from(self, &[ParamGroup::Encoder, ParamGroup::Llm])?;
        let source_rank = match self.cfg.arch {
            Arch::Hierarchical => self.cfg.selection.pairs.iter().position(|p| p.0 == tap),
            Arch::Concat { tap: t } => (t == tap).then_some(0),
        };
        if let Some(rank) = source_rank {
            let prefix = format!("projector.{rank}.");
            let names: Vec<String> = out
                .params
                .names()
                .filter(|n| n.starts_with("projector.0."))
                .cloned()
                .collect();
            for n in names {
                let src = n.replacen("projector.0.", &prefix, 1);
                let t = self.params.get(&src)?.clone();
                out.params.insert(&n, t)?;
            }
        }
        Ok(out)
    }

    fn copy_groups_from(&mut self, other: &HiveModel, groups: &[ParamGroup]) -> Result<()> {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| groups.contains(&self.params.group_of(n)))
            .cloned()
            .collect();
        for n in names {
            let t = other.params.get(&n)?.clone();
            self.params.insert(&n, t)?;
        }
        Ok(())
    }

    /// Sets every cross-attention gate to `value`.
    pub fn set_gates(&mut self, value: f64) -> Result<()> {
        for x in &self.bridge.xattn {
            self.params.get_mut(&x.gate)?.data_mut()[0] = value;
        }
        Ok(())
    }
}

pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{select_layers, Strategy};

    fn tiny(arch: Arch) -> HiveModel {
        let encoder = EncoderConfig {
            image_h: 8,
            image_w: 8,
            channels: 3,
            patch_size: 4,
            d_v: 8,
            depth: 4,
            heads: 2,
            use_class_token: false,
        };
        let lm = LMConfig {
            vocab_size: 11,
            d_l: 8,
            depth: 2,
            heads: 2,
            max_seq: 8,
        };
        HiveModel::new(ModelConfig {
            selection: select_layers(4, 2, 0.5, Strategy::Uniform).unwrap(),
            encoder,
            lm,
            arch,
            num_classes: None,
            precision: Precision::High,
            init_std: 0.1,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax_lowest(&[0.0, 2.0, 2.0, 1.0]), 1);
        assert_eq!(argmax_lowest(&[5.0, 5.0]), 0);
    }

    #[test]
    fn max_new_zero_returns_prompt() {
        let m = tiny(Arch::Hierarchical);
        let img = Tensor::zeros(&[8, 8, 3]);
        assert_eq!(
            m.generate_greedy(Some(&img), &[1, 4], Mode::Hierarchical, 0, None)
                .unwrap(),
            vec![1, 4]
        );
        assert!(matches!(
            m.generate_greedy(Some(&img), &[1, 4], Mode::Hierarchical, 7, None),
            Err(HiveError::Truncation { .. })
        ));
    }

    #[test]
    fn mode_arch_mismatch_is_wiring_error() {
        let m = tiny(Arch::Concat { tap: 4 });
        let img = Tensor::zeros(&[8, 8, 3]);
        let seq = TokenSequence::with_prompt(&[1], &[4, 5], Some(2), 8).unwrap();
        let mut ctx = m.ctx();
        assert!(matches!(
            m.forward(
                &mut ctx,
                Some(&img),
                &seq,
                Mode::Hierarchical,
                ForwardOptions::default()
            ),
            Err(HiveError::Wiring(_))
        ));
        let h = tiny(Arch::Hierarchical);
        let mut ctx = h.ctx();
        assert!(matches!(
            h.forward(&mut ctx, None, &seq, Mode::Hierarchical, ForwardOptions::default()),
            Err(HiveError::Wiring(_))
        ));
    }

    #[test]
    fn concat_prefix_rows_are_ignored() {
        let m = tiny(Arch::Concat { tap: 4 });
        let img = Tensor::zeros(&[8, 8, 3]);
        let seq = TokenSequence::with_prompt(&[1], &[4, 5, 6, 7], Some(2), 8).unwrap();
        let mut ctx = m.ctx();
        let out = m
            .forward(&mut ctx, Some(&img), &seq, Mode::Concat, ForwardOptions::default())
            .unwrap();
        assert_eq!(ctx.tape.shape(out.logits), &[4 + 5, 11]);
        assert_eq!(out.prefix_len, 4);
        assert!(out.targets[..4].iter().all(|&t| t == IGNORE_INDEX));
        assert_eq!(&out.targets[4..], seq.targets.as_slice());
    }

    #[test]
    fn to_concat_carries_final_projector() {
        let h = tiny(Arch::Hierarchical);
        let c = h.to_concat().unwrap();
        assert_eq!(
            c.params.get("projector.0.fc1.w").unwrap(),
            h.params.get("projector.1.fc1.w").unwrap()
        );
        assert_eq!(
            c.params.get("encoder.pos").unwrap(),
            h.params.get("encoder.pos").unwrap()
        );
        assert_eq!(c.params.count(ParamGroup::BridgeXattn), 0);
    }
}
