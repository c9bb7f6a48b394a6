mod common;

use common::*;
use hive_core::analysis::flops::total;
use hive_core::analysis::{
    attention_maps, closed_form_macs, export_gradient_map, gradient_map, llm_internal, measured_flops,
    read_attention_csv, read_gradient_csv, AttentionMaps,
};
use hive_core::config::RunConfig;
use hive_core::data::synthetic::grammar_tokenizer;
use hive_core::lm::TokenSequence;
use hive_core::{Arch, Component, HiveModel, Mode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random small model config text; `l_s` stays within both stacks.
fn random_config(r: &mut ChaCha8Rng) -> String {
    let p = [2, 4][r.random_range(0..2)];
    let (gh, gw) = (r.random_range(1..4), r.random_range(1..4));
    let d_v = [4, 6, 8][r.random_range(0..3)];
    let d_l = [4, 8, 12][r.random_range(0..3)];
    let l_v = r.random_range(2..7);
    let l_l = r.random_range(1..5);
    let l_s = r.random_range(1..=l_v.min(l_l));
    format!(
        "encoder.image_h = {}\nencoder.image_w = {}\nencoder.patch_size = {p}\nencoder.d_v = {d_v}\n\
         encoder.depth = {l_v}\nencoder.use_class_token = {}\nlm.d_l = {d_l}\nlm.depth = {l_l}\nselection.density = {}",
        gh * p,
        gw * p,
        r.random_bool(0.5),
        l_s as f64 / l_v as f64,
    )
}

fn build(run: &RunConfig, vocab: usize, arch: Arch) -> HiveModel {
    HiveModel::new(run.model_config(vocab, arch).unwrap()).unwrap()
}

fn ids(n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|i| (3 * i + 1) % vocab).collect()
}

#[test]
fn measured_macs_equal_closed_form_in_every_mode() {
    let mut r = rng(41);
    for _ in 0..6 {
        let run = small_run(&random_config(&mut r));
        let vocab = r.random_range(5..20);
        let n_t = r.random_range(1..=run.lm.max_seq);
        let text = ids(n_t, vocab);
        let hier = build(&run, vocab, Arch::Hierarchical);
        let img = random_image(&mut r, &hier);
        let concat = build(&run, vocab, Arch::Concat { tap: run.encoder.depth });
        for (model, mode) in [
            (&hier, Mode::Plain),
            (&hier, Mode::Hierarchical),
            (&concat, Mode::Concat),
        ] {
            let image = (mode != Mode::Plain).then_some(&img);
            let measured = measured_flops(model, image, &text, mode).unwrap();
            assert_eq!(
                measured,
                closed_form_macs(&model.cfg, mode, n_t),
                "{:?} {:?}",
                mode,
                model.cfg
            );
        }
    }
}

#[test]
fn plain_attention_scores_cost_depth_times_length_squared_times_width() {
    let model = small_model("lm.depth = 3\nlm.heads = 4", 3, Arch::Hierarchical);
    let n_t = 7;
    let m = measured_flops(&model, None, &ids(n_t, SMALL_VOCAB), Mode::Plain).unwrap();
    assert_eq!(m[&Component::Qk], (3 * n_t * n_t * 8) as u64);
    assert!(!m.contains_key(&Component::Xattn));
}

fn sweep_config(r: &mut ChaCha8Rng) -> (String, usize) {
    let grid = r.random_range(4..9);
    let n_t = r.random_range(1..=(grid * grid / 4).min(8));
    let l_v = 8;
    let l_s = r.random_range(1..=2);
    let d = [8, 16][r.random_range(0..2)];
    let text = format!(
        "encoder.image_h = {0}\nencoder.image_w = {0}\nencoder.patch_size = 2\nencoder.depth = {l_v}\n\
         encoder.d_v = {1}\nlm.d_l = {d}\nlm.depth = {2}\nselection.density = {3}",
        2 * grid,
        [8, 16][r.random_range(0..2)],
        r.random_range(2..5),
        l_s as f64 / l_v as f64,
    );
    (text, n_t)
}

#[test]
fn hierarchical_is_cheaper_than_concatenation_when_vision_dominates() {
    let mut r = rng(7);
    for _ in 0..10 {
        let (text, n_t) = sweep_config(&mut r);
        let run = small_run(&text);
        let hier = build(&run, 16, Arch::Hierarchical);
        let concat = build(&run, 16, Arch::Concat { tap: run.encoder.depth });
        let (n_v, l_s) = (hier.cfg.encoder.n_tokens(), hier.cfg.selection.len());
        assert!(n_v >= 4 * n_t && 4 * l_s <= run.encoder.depth);
        let img = random_image(&mut r, &hier);
        let h = total(&measured_flops(&hier, Some(&img), &ids(n_t, 16), Mode::Hierarchical).unwrap());
        let s = total(&measured_flops(&concat, Some(&img), &ids(n_t, 16), Mode::Concat).unwrap());
        assert!(h < s, "hier {h} >= sa {s} for\n{text}\nn_t={n_t}");
    }
}

#[test]
fn desk_example_is_cheaper_hierarchically() {
    let text =
        "encoder.image_h = 64\nencoder.image_w = 64\nencoder.patch_size = 4\nencoder.d_v = 64\nencoder.depth = 8\n\
                encoder.heads = 4\nlm.d_l = 64\nlm.depth = 4\nlm.heads = 4\nlm.max_seq = 16\nselection.density = 0.25";
    let run = small_run(text);
    let hier = build(&run, 32, Arch::Hierarchical);
    let concat = build(&run, 32, Arch::Concat { tap: 8 });
    assert_eq!((hier.cfg.encoder.n_tokens(), hier.cfg.selection.len()), (256, 2));
    let img = random_image(&mut rng(1), &hier);
    let text_ids = ids(16, 32);
    let h = measured_flops(&hier, Some(&img), &text_ids, Mode::Hierarchical).unwrap();
    let s = measured_flops(&concat, Some(&img), &text_ids, Mode::Concat).unwrap();
    assert!(total(&h) < total(&s));
    assert!(llm_internal(&h) < llm_internal(&s));
}

#[test]
fn vision_tokens_cost_the_language_model_nothing_hierarchically() {
    let mut totals = Vec::new();
    let mut internal = Vec::new();
    for grid in [1, 2, 3, 4] {
        let run = small_run(&format!("encoder.image_h = {0}\nencoder.image_w = {0}", 4 * grid));
        let hier = build(&run, SMALL_VOCAB, Arch::Hierarchical);
        let concat = build(&run, SMALL_VOCAB, Arch::Concat { tap: 4 });
        let img = random_image(&mut rng(grid as u64), &hier);
        let text = ids(5, SMALL_VOCAB);
        internal.push(llm_internal(
            &measured_flops(&hier, Some(&img), &text, Mode::Hierarchical).unwrap(),
        ));
        totals.push(total(
            &measured_flops(&concat, Some(&img), &text, Mode::Concat).unwrap(),
        ));
    }
    assert!(internal.windows(2).all(|w| w[0] == w[1]), "{internal:?}");
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
}

fn caption_seq(model: &HiveModel) -> TokenSequence {
    random_seq(&mut rng(99), model.cfg.lm.vocab_size, 6)
}

#[test]
fn stop_gradient_separates_cascaded_from_hierarchical() {
    let k = 2;
    let mut hier = small_model("", 21, Arch::Hierarchical);
    let mut cascaded = small_model("selection.strategy = final_only", 21, Arch::Hierarchical);
    hier.set_gates(0.5).unwrap();
    cascaded.set_gates(0.5).unwrap();
    let img = random_image(&mut rng(21), &hier);
    let seq = caption_seq(&hier);

    let c = gradient_map(&cascaded, &img, &seq, Some(k)).unwrap();
    for l in 1..=k {
        assert!(
            c.layer(l).unwrap().values.iter().all(|&v| v == 0.0),
            "cascaded layer {l}"
        );
    }
    assert!(c.layer(4).unwrap().max() > 1e-12);

    let h = gradient_map(&hier, &img, &seq, Some(k)).unwrap();
    let taps = hier.cfg.selection.encoder_layers();
    assert!(taps.iter().any(|&t| t <= k));
    for &t in taps.iter().filter(|&&t| t <= k) {
        let norm = h.layer(t).unwrap().values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "hierarchical tap {t}");
    }
}

#[test]
fn gradient_maps_have_patch_grid_shape_and_round_trip() {
    let mut model = small_model(
        "encoder.image_w = 12\nencoder.use_class_token = true",
        5,
        Arch::Hierarchical,
    );
    model.set_gates(0.5).unwrap();
    let img = random_image(&mut rng(5), &model);
    let map = gradient_map(&model, &img, &caption_seq(&model), None).unwrap();
    assert_eq!((map.grid_h, map.grid_w), (2, 3));
    assert_eq!(map.layers.len(), 4);
    assert!(map.layers.iter().all(|g| g.values.len() == 6 && g.max() > 0.0));
    let dir = tempfile::tempdir().unwrap();
    export_gradient_map(&map, dir.path()).unwrap();
    assert_eq!(read_gradient_csv(&dir.path().join("grad_map.csv")).unwrap(), map);
    let png = image::open(dir.path().join("layer_03.png")).unwrap();
    assert_eq!((png.width(), png.height()), (24, 16));
}

#[test]
fn concat_models_also_yield_gradient_maps() {
    let model = small_model("", 1, Arch::Concat { tap: 4 });
    let img = random_image(&mut rng(1), &model);
    assert!(gradient_map(&model, &img, &caption_seq(&model), None).is_ok());
}

fn grammar_model(extra: &str, seed: u64) -> (HiveModel, hive_core::tokenizer::Tokenizer) {
    let tok = grammar_tokenizer();
    let mut run = small_run(extra);
    run.seed = seed;
    let mut m = build(&run, tok.vocab_size(), Arch::Hierarchical);
    m.set_gates(0.5).unwrap();
    (m, tok)
}

#[test]
fn attention_rows_are_distributions() {
    let (model, tok) = grammar_model("encoder.use_class_token = true", 3);
    let img = random_image(&mut rng(3), &model);
    let text = [vec![tok.bos()], tok.encode("a red square")].concat();
    let maps = attention_maps(&model, &tok, &img, &text, &[0, 2]).unwrap();
    assert_eq!(maps.records.len(), model.cfg.selection.len() * 2 * 2);
    for rec in &maps.records {
        assert_eq!(rec.weights.len(), 5);
        assert!((rec.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(maps.records[0].token_text, "<bos>");
    let m = maps.patch_map(0, 2).unwrap();
    assert_eq!(m.len(), 4);
    assert!(m.iter().sum::<f64>() < 1.0);
    let dir = tempfile::tempdir().unwrap();
    hive_core::analysis::export_attention_maps(&maps, &img, dir.path()).unwrap();
    let back = read_attention_csv(&dir.path().join("attention.csv"), &model.cfg.selection.pairs).unwrap();
    assert_eq!(back, maps.records);
    assert!(image::open(dir.path().join("attention_grid.png")).is_ok());
}

#[test]
fn a_single_vision_token_receives_all_attention() {
    let (model, tok) = grammar_model("encoder.image_h = 4\nencoder.image_w = 4", 4);
    let img = random_image(&mut rng(4), &model);
    let text = [vec![tok.bos()], tok.encode("a blue circle")].concat();
    let all: Vec<usize> = (0..text.len()).collect();
    let maps: AttentionMaps = attention_maps(&model, &tok, &img, &text, &all).unwrap();
    for rank in maps.ranks() {
        for &t in &all {
            assert_eq!(maps.patch_map(rank, t).unwrap(), vec![1.0]);
        }
    }
}

#[test]
fn out_of_range_tokens_are_request_errors() {
    let (model, tok) = grammar_model("", 2);
    let img = random_image(&mut rng(2), &model);
    let err = attention_maps(&model, &tok, &img, &[tok.bos()], &[1]).unwrap_err();
    assert!(matches!(err, hive_core::HiveError::Request(_)), "{err}");
}
