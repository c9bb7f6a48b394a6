//! Causal decoder language model.

use crate::autograd::{Component, Var, IGNORE_INDEX};
use crate::error::{HiveError, Result};
use crate::nn::{causal_mask, AttnComponents, LayerNorm, Linear, Mlp, SelfAttention};
use crate::params::{Ctx, Init, ParamStore};

/// Text longer than this many tokens is truncated.
pub const DEFAULT_MAX_SEQ: usize = 77;

#[derive(Clone, Debug, PartialEq)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_l: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            vocab_size: 300,
            d_l: 64,
            depth: 4,
            heads: 4,
            max_seq: DEFAULT_MAX_SEQ,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_l == 0 || self.depth == 0 || self.heads == 0 {
            return Err(HiveError::Config("lm dimensions must be positive".into()));
        }
        if !self.d_l.is_multiple_of(self.heads) {
            return Err(HiveError::Config(format!(
                "lm width {} is not divisible by {} heads",
                self.d_l, self.heads
            )));
        }
        if self.max_seq < 2 {
            return Err(HiveError::Config("lm.max_seq must be at least 2".into()));
        }
        Ok(())
    }
}

/// Input ids and their next-token targets (`IGNORE_INDEX` where unsupervised).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenSequence {
    /// Builds `prompt ++ completion ++ [eos]`, shifted into inputs and targets.
    /// Only completion tokens (and `eos`) are supervised. Truncated to `max_seq` inputs.
    pub fn with_prompt(prompt: &[usize], completion: &[usize], eos: Option<usize>, max_seq: usize) -> Result<Self> {
        if prompt.is_empty() {
            return Err(HiveError::Data("prompt must be nonempty".into()));
        }
        if prompt.len() > max_seq {
            return Err(HiveError::Truncation {
                len: prompt.len(),
                max_seq,
            });
        }
        let mut full: Vec<usize> = prompt.iter().chain(completion).copied().collect();
        full.extend(eos);
        full.truncate(max_seq + 1);
        let n = full.len() - 1;
        if n == 0 {
            return Ok(Self::prompt_only(prompt));
        }
        let ids = full[..n].to_vec();
        let targets = (0..n)
            .map(|t| {
                if t + 1 < prompt.len() {
                    IGNORE_INDEX
                } else {
                    full[t + 1]
                }
            })
            .collect();
        Ok(TokenSequence { ids, targets })
    }

    /// An unsupervised sequence, as used to seed generation.
    pub fn prompt_only(ids: &[usize]) -> Self {
        TokenSequence {
            ids: ids.to_vec(),
            targets: vec![IGNORE_INDEX; ids.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

#[derive(Clone, Debug)]
pub struct LmBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

const LLM_ATTN: AttnComponents = AttnComponents {
    proj: Component::Proj,
    qk: Component::Qk,
    av: Component::Av,
};

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LMConfig,
    pub tok_emb: String,
    pub pos_emb: String,
    pub blocks: Vec<LmBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, cfg: &LMConfig) -> Result<Self> {
        cfg.validate()?;
        let tok_emb = "llm.tok_emb".to_string();
        store.insert(&tok_emb, init.normal(&[cfg.vocab_size, cfg.d_l]))?;
        let pos_emb = "llm.pos_emb".to_string();
        store.insert(&pos_emb, init.normal(&[cfg.max_seq, cfg.d_l]))?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let base = format!("llm.blocks.{i}");
            blocks.push(LmBlock {
                ln1: LayerNorm::new(store, &format!("{base}.ln1"), cfg.d_l)?,
                attn: SelfAttention::new(store, init, &format!("{base}.attn"), cfg.d_l, cfg.heads)?,
                ln2: LayerNorm::new(store, &format!("{base}.ln2"), cfg.d_l)?,
                mlp: Mlp::new(store, init, &format!("{base}.mlp"), cfg.d_l)?,
            });
        }
        Ok(LanguageModel {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            ln_f: LayerNorm::new(store, "llm.ln_f", cfg.d_l)?,
            head: Linear::new(store, init, "llm.head", cfg.d_l, cfg.vocab_size, true)?,
            blocks,
        })
    }

    /// Token plus positional embeddings; text positions always start at 0.
    pub fn embed(&self, ctx: &mut Ctx<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(HiveError::Data("empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_seq {
            return Err(HiveError::Truncation {
                len: ids.len(),
                max_seq: self.cfg.max_seq,
            });
        }
        let table = ctx.param(&self.tok_emb)?;
        let tok = ctx.tape.gather_rows(table, ids)?;
        let pos_table = ctx.param(&self.pos_emb)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = ctx.tape.gather_rows(pos_table, &positions)?;
        ctx.tape.add(tok, pos)
    }

    fn block(&self, l: usize) -> Result<&LmBlock> {
        self.blocks
            .get(l.wrapping_sub(1))
            .ok_or_else(|| HiveError::Lookup(format!("llm layer {l} out of range")))
    }

    /// `x + causal_self_attn(ln1(x))` for layer `l` (1-based).
    pub fn attn_residual(&self, ctx: &mut Ctx<'_>, l: usize, x: Var, mask: &[bool]) -> Result<Var> {
        let b = self.block(l)?;
        let h = b.ln1.forward(ctx, x)?;
        let a = b.attn.forward(ctx, h, Some(mask), LLM_ATTN)?;
        ctx.tape.add(x, a)
    }

    /// `x + mlp(ln2(x))` for layer `l` (1-based).
    pub fn mlp_residual(&self, ctx: &mut Ctx<'_>, l: usize, x: Var) -> Result<Var> {
        let b = self.block(l)?;
        let h = b.ln2.forward(ctx, x)?;
        ctx.tape.set_component(Component::Mlp);
        let m = b.mlp.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }

    pub fn logits(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.ln_f.forward(ctx, x)?;
        ctx.tape.set_component(Component::Head);
        self.head.forward(ctx, h)
    }

    /// Text-only reference decoder.
    pub fn forward_text(&self, ctx: &mut Ctx<'_>, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed(ctx, ids)?;
        let mask = causal_mask(ids.len());
        for l in 1..=self.cfg.depth {
            x = self.attn_residual(ctx, l, x, &mask)?;
            x = self.mlp_residual(ctx, l, x)?;
        }
        self.logits(ctx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_positions_are_ignored() {
        let s = TokenSequence::with_prompt(&[1, 7], &[4, 5], Some(2), 77).unwrap();
        assert_eq!(s.ids, vec![1, 7, 4, 5]);
        assert_eq!(s.targets, vec![IGNORE_INDEX, 4, 5, 2]);
        assert_eq!(s.supervised(), 3);
    }

    #[test]
    fn truncates_to_max_seq() {
        let completion: Vec<usize> = (10..110).collect();
        let s = TokenSequence::with_prompt(&[1], &completion, Some(2), DEFAULT_MAX_SEQ).unwrap();
        assert_eq!(s.ids.len(), 77);
        assert_eq!(*s.targets.last().unwrap(), 10 + 76);
        assert!(TokenSequence::with_prompt(&[], &[3], None, 5).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = LMConfig {
            d_l: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LMConfig {
            max_seq: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
