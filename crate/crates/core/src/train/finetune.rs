//! Downstream drivers: frozen-encoder linear probe and two-stage concat-mode VLM tuning.

use super::optim::OptimizerState;
use super::schedule::StageSchedule;
use super::trainer::{batch_indices, mean_of, optimize_step, run_stage, EncodedSample, MetricsLog};
use crate::autograd::IGNORE_INDEX;
use crate::data::{augment, AugmentConfig, CaptionSample};
use crate::error::{HiveError, Result};
use crate::model::{argmax_lowest, HiveModel, Mode};
use crate::params::ParamGroup;

pub const CLS_STAGE_TAG: u64 = 10;
pub const VLM_STAGE_TAGS: [u64; 2] = [21, 22];

#[derive(Clone, Debug)]
pub struct ClassifierReport {
    pub model: HiveModel,
    pub metrics: MetricsLog,
    /// Fraction of `data` classified correctly, without augmentation.
    pub accuracy: f64,
}

fn labels(data: &[CaptionSample], num_classes: usize) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| match s.class_label {
            Some(l) if l < num_classes => Ok(l),
            Some(l) => Err(HiveError::Data(format!(
                "sample {i}: label {l} outside 0..{num_classes}"
            ))),
            None => Err(HiveError::Data(format!("sample {i} has no class label"))),
        })
        .collect()
}

pub fn classifier_accuracy(model: &HiveModel, data: &[CaptionSample], labels: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for (s, &l) in data.iter().zip(labels) {
        let mut ctx = model.ctx();
        let logits = model.classify(&mut ctx, &s.image)?;
        if argmax_lowest(ctx.tape.value(logits)) == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains a fresh linear head on pooled final-layer features; everything else stays frozen.
pub fn finetune_classifier(
    pretrained: &HiveModel,
    data: &[CaptionSample],
    num_classes: usize,
    sched: &StageSchedule,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<ClassifierReport> {
    if data.is_empty() {
        return Err(HiveError::Data("empty dataset".into()));
    }
    if sched.trainable.iter().any(|&g| g != ParamGroup::ClassifierHead) {
        return Err(HiveError::Schedule(
            "classifier fine-tuning trains only the classifier head".into(),
        ));
    }
    sched.validate()?;
    aug.validate()?;
    let labels = labels(data, num_classes)?;
    let mut model = pretrained.with_classifier(num_classes)?;
    let mut opt = OptimizerState::default();
    let mut metrics = MetricsLog::default();
    let n = data.len();
    // The encoder is frozen, so without augmentation its pooled features are fixed.
    let cached = if aug.enabled {
        None
    } else {
        let mut feats = Vec::with_capacity(n);
        for s in data {
            let mut ctx = model.ctx();
            let f = model.pooled_features(&mut ctx, &s.image)?;
            feats.push(ctx.tape.to_tensor(f));
        }
        Some(feats)
    };
    for iter in 1..=sched.total_iters {
        let idx = batch_indices(seed, CLS_STAGE_TAG, iter, sched.batch_size, n);
        let epoch = ((iter - 1) * sched.batch_size / n) as u64;
        let mut images = Vec::new();
        if cached.is_none() {
            for &i in &idx {
                images.push(augment(&data[i].image, aug, seed, epoch, i as u64)?);
            }
        }
        let stats = optimize_step(&mut model, sched, iter, &mut opt, |m, ctx| {
            let mut terms = Vec::with_capacity(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                let logits = match &cached {
                    Some(f) => m.classify_pooled(ctx, &f[i])?,
                    None => m.classify(ctx, &images[k])?,
                };
                terms.push(ctx.tape.cross_entropy(logits, &[labels[i]], IGNORE_INDEX)?);
            }
            mean_of(ctx, &terms)
        })?;
        metrics.push(&sched.name, stats);
    }
    let accuracy = classifier_accuracy(&model, data, &labels)?;
    Ok(ClassifierReport {
        model,
        metrics,
        accuracy,
    })
}

#[derive(Clone, Debug)]
pub struct VlmReport {
    pub model: HiveModel,
    pub metrics: MetricsLog,
}

/// Converts to concat mode, then trains (a) the projector, (b) the LLM, with fresh optimizer state each.
pub fn finetune_vlm(
    pretrained: &HiveModel,
    data: &[EncodedSample],
    scheds: &[StageSchedule; 2],
    seed: u64,
) -> Result<VlmReport> {
    use ParamGroup::*;
    let expect = [[Projector], [Llm]];
    for (s, e) in scheds.iter().zip(expect) {
        if s.trainable.iter().copied().collect::<Vec<_>>() != e {
            return Err(HiveError::Schedule(format!("{} must train only {:?}", s.name, e[0])));
        }
    }
    let mut model = pretrained.to_concat()?;
    let mut metrics = MetricsLog::default();
    for (s, tag) in scheds.iter().zip(VLM_STAGE_TAGS) {
        let mut opt = OptimizerState::default();
        run_stage(
            &mut model,
            data,
            Mode::Concat,
            s,
            seed,
            tag,
            &mut opt,
            1,
            s.total_iters,
            &mut metrics,
        )?;
    }
    Ok(VlmReport { model, metrics })
}
