//! Training step, stage loop and the three-stage pre-training driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_global_norm, AdamWParams, OptimizerState};
use super::schedule::{validate_pretrain, StageSchedule};
use crate::autograd::Var;
use crate::checkpoint::{save_checkpoint, Manifest};
use crate::data::CaptionSample;
use crate::error::{HiveError, Result};
use crate::lm::TokenSequence;
use crate::model::{HiveModel, Mode};
use crate::params::Ctx;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

/// A sample with its caption tokenized as `[bos] → caption ++ [eos]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub image: Tensor,
    pub caption: String,
    pub seq: TokenSequence,
    pub label: Option<usize>,
}

pub fn encode_samples(samples: &[CaptionSample], tok: &Tokenizer, max_seq: usize) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            let completion = tok.encode(&s.caption);
            Ok(EncodedSample {
                image: s.image.clone(),
                caption: s.caption.clone(),
                seq: TokenSequence::with_prompt(&[tok.bos()], &completion, Some(tok.eos()), max_seq)?,
                label: s.class_label,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Per-step metrics, rendered as CSV `iter,stage,lr,loss,grad_norm`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<(String, StepStats)>,
}

impl MetricsLog {
    pub fn push(&mut self, stage: &str, s: StepStats) {
        self.rows.push((stage.to_string(), s));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,stage,lr,loss,grad_norm\n");
        for (stage, s) in &self.rows {
            let _ = writeln!(out, "{},{},{:e},{},{}", s.iter, stage, s.lr, s.loss, s.grad_norm);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, s)| s.loss).collect()
    }
}

/// Samples of step `iter` (1-based): consecutive slices of a per-epoch
/// permutation, so the order depends only on `(seed, stage_tag, iter)`.
pub fn batch_indices(seed: u64, stage_tag: u64, iter: usize, batch: usize, n: usize) -> Vec<usize> {
    let start = (iter.saturating_sub(1)) * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch)
        .map(|p| {
            let epoch = p / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage_tag.wrapping_mul(0x2545_F491_4F6C_DD1D));
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[p % n]
        })
        .collect()
}

/// One optimizer step on the mean of the per-sample losses.
pub fn train_step(
    model: &mut HiveModel,
    batch: &[&EncodedSample],
    mode: Mode,
    sched: &StageSchedule,
    iter: usize,
    opt: &mut OptimizerState,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(HiveError::Data("empty batch".into()));
    }
    optimize_step(model, sched, iter, opt, |m, ctx| {
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            terms.push(m.loss(ctx, Some(&s.image), &s.seq, mode)?);
        }
        mean_of(ctx, &terms)
    })
}

/// Mean of scalar tape values.
pub fn mean_of(ctx: &mut Ctx<'_>, terms: &[Var]) -> Result<Var> {
    let mut total = *terms.first().ok_or_else(|| HiveError::Data("empty batch".into()))?;
    for &t in &terms[1..] {
        total = ctx.tape.add(total, t)?;
    }
    Ok(ctx.tape.scale(total, 1.0 / terms.len() as f64))
}

/// Forward through `build`, backward, clip, then AdamW on `sched.trainable` only.
pub fn optimize_step<F>(
    model: &mut HiveModel,
    sched: &StageSchedule,
    iter: usize,
    opt: &mut OptimizerState,
    build: F,
) -> Result<StepStats>
where
    F: FnOnce(&HiveModel, &mut Ctx<'_>) -> Result<Var>,
{
    model.params.set_trainable(&sched.trainable);
    let lr = sched.lr_at(iter)?;
    let (loss, mut grads) = {
        let mut ctx = model.ctx();
        let root = build(model, &mut ctx)?;
        let loss = ctx.tape.value(root)[0];
        if !loss.is_finite() {
            return Err(HiveError::Divergence { iter, loss });
        }
        ctx.tape.backward(root)?;
        (loss, ctx.grads())
    };
    let grad_norm = clip_global_norm(&mut grads, sched.clip_norm);
    if !grad_norm.is_finite() {
        return Err(HiveError::Divergence { iter, loss: grad_norm });
    }
    let hp = AdamWParams {
        lr,
        decay_fraction: sched.lr_fraction(iter)?,
        betas: sched.betas,
        eps: sched.eps,
        weight_decay: sched.weight_decay,
    };
    opt.update(&mut model.params, &grads, hp);
    Ok(StepStats {
        iter,
        lr,
        loss,
        grad_norm,
    })
}

/// Runs iterations `from..=to` of a stage.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    model: &mut HiveModel,
    data: &[EncodedSample],
    mode: Mode,
    sched: &StageSchedule,
    seed: u64,
    stage_tag: u64,
    opt: &mut OptimizerState,
    from: usize,
    to: usize,
    log: &mut MetricsLog,
) -> Result<()> {
    sched.validate()?;
    if data.is_empty() {
        return Err(HiveError::Data("empty dataset".into()));
    }
    if to > sched.total_iters {
        return Err(HiveError::Schedule(format!(
            "{}: {to} beyond total {}",
            sched.name, sched.total_iters
        )));
    }
    for iter in from.max(1)..=to {
        let idx = batch_indices(seed, stage_tag, iter, sched.batch_size, data.len());
        let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &data[i]).collect();
        let stats = train_step(model, &batch, mode, sched, iter, opt)?;
        log.push(&sched.name, stats);
    }
    Ok(())
}

/// Mean next-token loss over `data`, one sample at a time.
pub fn mean_token_loss(model: &HiveModel, data: &[EncodedSample], mode: Mode) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let mut ctx = model.ctx();
        let l = model.loss(&mut ctx, Some(&s.image), &s.seq, mode)?;
        total += ctx.tape.value(l)[0];
    }
    Ok(total / data.len() as f64)
}

/// Greedy caption from `[bos]`, decoded without the trailing `eos`.
pub fn caption(model: &HiveModel, tok: &Tokenizer, image: &Tensor, mode: Mode) -> Result<String> {
    let max_new = model.lm.cfg.max_seq - 1;
    let ids = model.generate_greedy(Some(image), &[tok.bos()], mode, max_new, Some(tok.eos()))?;
    let body: Vec<usize> = ids[1..].iter().copied().take_while(|&t| t != tok.eos()).collect();
    Ok(tok.decode(&body))
}

/// Number of samples whose greedy caption equals the ground truth.
pub fn caption_matches(model: &HiveModel, tok: &Tokenizer, data: &[EncodedSample], mode: Mode) -> Result<usize> {
    let mut hits = 0;
    for s in data {
        if caption(model, tok, &s.image, mode)? == s.caption {
            hits += 1;
        }
    }
    Ok(hits)
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub metrics: MetricsLog,
    /// Mean training loss measured after each stage.
    pub stage_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where `run_pretrain` writes per-stage checkpoints and metrics.
pub struct Output<'a> {
    pub dir: &'a Path,
    pub tokenizer: &'a Tokenizer,
    pub manifest: Manifest,
}

/// Stages 1→2→3 in order with fresh optimizer state per stage.
pub fn run_pretrain(
    model: &mut HiveModel,
    data: &[EncodedSample],
    stages: &[StageSchedule; 3],
    seed: u64,
    out: Option<&Output<'_>>,
) -> Result<PretrainReport> {
    validate_pretrain(stages)?;
    let mut report = PretrainReport::default();
    for (i, sched) in stages.iter().enumerate() {
        let mut opt = OptimizerState::default();
        let mut log = MetricsLog::default();
        run_stage(
            model,
            data,
            Mode::Hierarchical,
            sched,
            seed,
            i as u64 + 1,
            &mut opt,
            1,
            sched.total_iters,
            &mut log,
        )?;
        let loss = mean_token_loss(model, data, Mode::Hierarchical)?;
        report.stage_losses.push(loss);
        if let Some(o) = out {
            let dir = o.dir.join(format!("stage{}", i + 1));
            let mut m = o.manifest.clone();
            m.set("stage", i + 1);
            m.set("stage.name", &sched.name);
            m.set("stage.iter", sched.total_iters);
            m.set("stage.order", stage_order(stages, i));
            m.set("train_loss", loss);
            save_checkpoint(&dir, model, Some(&opt), Some(o.tokenizer), &m)?;
            log.save(&dir.join("metrics.csv"))?;
            report.checkpoints.push(dir);
        }
        report.metrics.rows.extend(log.rows);
    }
    if let Some(o) = out {
        report.metrics.save(&o.dir.join("metrics.csv"))?;
    }
    Ok(report)
}

fn stage_order(stages: &[StageSchedule; 3], upto: usize) -> String {
    stages[..=upto]
        .iter()
        .map(|s| s.name.as_str())
        .collect::<Vec<_>>()
        .join(">")
}
