mod common;

use std::collections::BTreeMap;

use common::*;
use hive_core::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use hive_core::config::RunConfig;
use hive_core::data::augment::AugmentConfig;
use hive_core::data::synthetic::{gen_synthetic, grammar_tokenizer, DatasetKind, SyntheticSpec};
use hive_core::params::ParamGroup;
use hive_core::train::finetune::{finetune_classifier, finetune_vlm};
use hive_core::train::optim::{clip_global_norm, global_norm, AdamWParams, OptimizerState};
use hive_core::train::schedule::StageSchedule;
use hive_core::train::trainer::{encode_samples, run_stage, EncodedSample, MetricsLog};
use hive_core::{Arch, HiveModel, Mode, Precision, Tensor};
use proptest::prelude::*;

fn setup(kind: DatasetKind, n: usize) -> (RunConfig, HiveModel, Vec<EncodedSample>) {
    let tok = grammar_tokenizer();
    let mut run = small_run("lm.max_seq = 16");
    run.seed = 3;
    let model = HiveModel::new(run.model_config(tok.vocab_size(), Arch::Hierarchical).unwrap()).unwrap();
    let spec = SyntheticSpec {
        image_h: 8,
        image_w: 8,
        channels: 3,
        kind,
    };
    let samples = gen_synthetic(n, 5, spec).unwrap();
    let data = encode_samples(&samples, &tok, 16).unwrap();
    (run, model, data)
}

fn short(s: &StageSchedule, total: usize) -> StageSchedule {
    let mut s = s.clone();
    s.total_iters = total;
    s.warmup_iters = 2;
    s.batch_size = 2;
    s
}

fn snapshot(model: &HiveModel) -> BTreeMap<ParamGroup, BTreeMap<String, Vec<f64>>> {
    ParamGroup::ALL.iter().map(|&g| (g, model.params.snapshot(g))).collect()
}

fn max_delta(a: &BTreeMap<String, Vec<f64>>, b: &BTreeMap<String, Vec<f64>>) -> f64 {
    a.iter()
        .flat_map(|(k, v)| v.iter().zip(&b[k]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Trained groups moved, every other group is bit-identical.
fn assert_freeze(before: &HiveModel, after: &HiveModel, sched: &StageSchedule) {
    let (b, a) = (snapshot(before), snapshot(after));
    for g in ParamGroup::ALL {
        if b[&g].is_empty() {
            continue;
        }
        if sched.trainable.contains(&g) {
            assert!(max_delta(&b[&g], &a[&g]) > 0.0, "{}: {g:?} did not move", sched.name);
        } else {
            assert_eq!(b[&g], a[&g], "{}: frozen {g:?} changed", sched.name);
        }
    }
}

#[test]
fn pretrain_stages_touch_only_their_groups() {
    let (run, mut model, data) = setup(DatasetKind::Caption, 8);
    for (i, s) in run.stages.iter().enumerate() {
        let sched = short(s, 10);
        let before = model.clone();
        let mut opt = OptimizerState::default();
        let mut log = MetricsLog::default();
        run_stage(
            &mut model,
            &data,
            Mode::Hierarchical,
            &sched,
            1,
            i as u64 + 1,
            &mut opt,
            1,
            10,
            &mut log,
        )
        .unwrap();
        assert_eq!(opt.step, 10);
        assert_freeze(&before, &model, &sched);
    }
}

#[test]
fn vlm_sub_stages_touch_only_their_groups() {
    let (run, model, data) = setup(DatasetKind::Caption, 8);
    let mut model = model.to_concat().unwrap();
    for (s, tag) in run.vlm.iter().zip([21, 22]) {
        let sched = short(s, 10);
        let before = model.clone();
        let mut opt = OptimizerState::default();
        run_stage(
            &mut model,
            &data,
            Mode::Concat,
            &sched,
            1,
            tag,
            &mut opt,
            1,
            10,
            &mut MetricsLog::default(),
        )
        .unwrap();
        assert_freeze(&before, &model, &sched);
    }
    let scheds = [short(&run.vlm[0], 3), short(&run.vlm[1], 3)];
    let (_, fresh, _) = setup(DatasetKind::Caption, 8);
    let report = finetune_vlm(&fresh, &data, &scheds, 1).unwrap();
    assert_eq!(report.model.native_mode(), Mode::Concat);
    assert_eq!(report.metrics.rows.len(), 6);
    assert_eq!(
        report.model.params.snapshot(ParamGroup::Encoder),
        fresh.params.snapshot(ParamGroup::Encoder)
    );
}

#[test]
fn classifier_fine_tuning_trains_only_the_head() {
    let (run, model, _) = setup(DatasetKind::Classify, 8);
    let samples = gen_synthetic(
        8,
        5,
        SyntheticSpec {
            image_h: 8,
            image_w: 8,
            channels: 3,
            kind: DatasetKind::Classify,
        },
    )
    .unwrap();
    let sched = short(&run.cls, 10);
    let aug = AugmentConfig {
        enabled: true,
        ..AugmentConfig::default()
    };
    let report = finetune_classifier(&model, &samples, 2, &sched, &aug, 1).unwrap();
    for g in [
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::BridgeXattn,
        ParamGroup::Llm,
    ] {
        assert_eq!(report.model.params.snapshot(g), model.params.snapshot(g), "{g:?}");
    }
    assert_eq!(report.model.params.count(ParamGroup::ClassifierHead), 2 * 8 + 2);
    let mut wide = sched.clone();
    wide.trainable.insert(ParamGroup::Encoder);
    assert!(finetune_classifier(&model, &samples, 2, &wide, &aug, 1).is_err());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (run, start, data) = setup(DatasetKind::Caption, 8);
    let sched = short(&run.stages[1], 20);
    let mut straight = start.clone();
    straight.set_gates(0.2).unwrap();
    let mut resumed = straight.clone();

    let mut opt = OptimizerState::default();
    let mut log = MetricsLog::default();
    run_stage(
        &mut straight,
        &data,
        Mode::Hierarchical,
        &sched,
        9,
        2,
        &mut opt,
        1,
        20,
        &mut log,
    )
    .unwrap();

    let mut opt_a = OptimizerState::default();
    let mut log_a = MetricsLog::default();
    run_stage(
        &mut resumed,
        &data,
        Mode::Hierarchical,
        &sched,
        9,
        2,
        &mut opt_a,
        1,
        10,
        &mut log_a,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &resumed, Some(&opt_a), None, &Manifest::default()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let mut resumed = loaded.model;
    let mut opt_b = loaded.optimizer.unwrap();
    assert_eq!(opt_b, opt_a);
    run_stage(
        &mut resumed,
        &data,
        Mode::Hierarchical,
        &sched,
        9,
        2,
        &mut opt_b,
        11,
        20,
        &mut log_a,
    )
    .unwrap();

    assert_eq!(resumed.params, straight.params);
    assert_eq!(opt_b, opt);
    assert_eq!(log_a.losses(), log.losses());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let train = || {
        let (run, mut model, data) = setup(DatasetKind::Caption, 8);
        let sched = short(&run.stages[0], 5);
        let mut opt = OptimizerState::default();
        run_stage(
            &mut model,
            &data,
            Mode::Hierarchical,
            &sched,
            4,
            1,
            &mut opt,
            1,
            5,
            &mut MetricsLog::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, Some(&opt), None, &Manifest::default()).unwrap();
        (
            std::fs::read(dir.path().join(hive_core::checkpoint::PARAMS_FILE)).unwrap(),
            std::fs::read(dir.path().join(hive_core::checkpoint::OPTIM_FILE)).unwrap(),
        )
    };
    assert_eq!(train(), train());
}

/// Bias-corrected AdamW written out independently for a single scalar.
fn adamw_oracle(w0: f64, grads: &[f64], lr: f64, betas: (f64, f64), eps: f64) -> f64 {
    let (mut w, mut m, mut v) = (w0, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = betas.0 * m + (1.0 - betas.0) * g;
        v = betas.1 * v + (1.0 - betas.1) * g * g;
        let mhat = m / (1.0 - betas.0.powi(t));
        let vhat = v / (1.0 - betas.1.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
    }
    w
}

#[test]
fn adamw_matches_scalar_oracle() {
    let hp = AdamWParams {
        lr: 0.1,
        decay_fraction: 1.0,
        betas: (0.9, 0.999),
        eps: 1e-8,
        weight_decay: 0.0,
    };
    for g in [0.37, -2.5, 1e-3, 40.0] {
        let mut store = hive_core::params::ParamStore::new(Precision::High);
        store.insert("llm.w", Tensor::filled(&[1], 1.0)).unwrap();
        let mut opt = OptimizerState::default();
        let grads = BTreeMap::from([("llm.w".to_string(), vec![g])]);
        opt.update(&mut store, &grads, hp);
        let got = store.get("llm.w").unwrap().data()[0] - 1.0;
        let want = adamw_oracle(1.0, &[g], 0.1, (0.9, 0.999), 1e-8) - 1.0;
        assert!(
            (got - want).abs() <= 1e-15 * want.abs().max(1.0),
            "g={g}: {got} vs {want}"
        );
        assert!((got + 0.1 * g.signum()).abs() < 1e-6);
    }
    let seq = [0.5, -0.2, 0.9, 0.0, -1.3];
    let mut store = hive_core::params::ParamStore::new(Precision::High);
    store.insert("llm.w", Tensor::filled(&[1], 0.25)).unwrap();
    let mut opt = OptimizerState::default();
    for &g in &seq {
        opt.update(&mut store, &BTreeMap::from([("llm.w".to_string(), vec![g])]), hp);
    }
    let want = adamw_oracle(0.25, &seq, 0.1, (0.9, 0.999), 1e-8);
    assert!((store.get("llm.w").unwrap().data()[0] - want).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

    #[test]
    fn clipping_bounds_adversarial_gradients(
        exps in prop::collection::vec(-300i32..300, 1..12),
        signs in prop::collection::vec(any::<bool>(), 12),
        clip in 1e-3f64..1e3,
    ) {
        let mut grads = BTreeMap::new();
        for (i, e) in exps.iter().enumerate() {
            let v = if signs[i] { -1.0 } else { 1.0 } * 10f64.powi(*e);
            grads.insert(format!("llm.p{i}"), vec![v, 0.5 * v]);
        }
        let before = grads.clone();
        let pre = clip_global_norm(&mut grads, clip);
        prop_assert!(pre.is_finite());
        let post = global_norm(&grads);
        if pre > clip {
            prop_assert!((post - clip).abs() <= 1e-6 * clip);
        } else {
            prop_assert_eq!(&grads, &before);
        }
    }
}

#[test]
fn clipping_a_norm_of_ten_to_one() {
    let mut g = BTreeMap::from([("llm.a".to_string(), vec![6.0]), ("llm.b".to_string(), vec![8.0])]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 10.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-6);
}
