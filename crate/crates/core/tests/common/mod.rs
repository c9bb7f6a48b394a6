#![allow(dead_code)]

use hive_core::autograd::{Tape, Var, IGNORE_INDEX};
use hive_core::config::RunConfig;
use hive_core::gradcheck::{check_gradients, relative_error, GradCheckConfig};
use hive_core::lm::TokenSequence;
use hive_core::params::Ctx;
use hive_core::{Arch, HiveModel, Precision, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Run config for small, fast models; `extra` is appended key = value text.
pub fn small_run(extra: &str) -> RunConfig {
    let base = "encoder.image_h = 8\nencoder.image_w = 8\nencoder.patch_size = 4\nencoder.d_v = 8\nencoder.depth = 4\n\
                encoder.heads = 2\nlm.d_l = 8\nlm.depth = 2\nlm.heads = 2\nlm.max_seq = 8\nselection.density = 0.5\n";
    let mut cfg = RunConfig::default();
    for (k, v) in hive_core::config::parse_kv(base).unwrap() {
        cfg.set(&k, &v).unwrap();
    }
    for (k, v) in hive_core::config::parse_kv(extra).unwrap() {
        cfg.set(&k, &v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

pub const SMALL_VOCAB: usize = 12;

pub fn small_model(extra: &str, seed: u64, arch: Arch) -> HiveModel {
    let mut run = small_run(extra);
    run.seed = seed;
    HiveModel::new(run.model_config(SMALL_VOCAB, arch).unwrap()).unwrap()
}

pub fn random_image(r: &mut ChaCha8Rng, model: &HiveModel) -> Tensor {
    let e = &model.cfg.encoder;
    let n = e.image_h * e.image_w * e.channels;
    Tensor::new(
        vec![e.image_h, e.image_w, e.channels],
        (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_seq(r: &mut ChaCha8Rng, vocab: usize, len: usize) -> TokenSequence {
    let ids: Vec<usize> = (0..len + 1).map(|_| r.random_range(0..vocab)).collect();
    TokenSequence::with_prompt(&ids[..1], &ids[1..], None, len).unwrap()
}

/// Central differences over model parameters against tape gradients of `loss`.
/// Checks at most `coords` evenly strided entries per parameter tensor.
pub fn model_gradcheck<F>(model: &HiveModel, coords: usize, loss: F) -> (f64, String)
where
    F: Fn(&HiveModel, &mut Ctx<'_>) -> Result<Var>,
{
    assert_eq!(model.params.precision(), Precision::High);
    let mut ctx = model.ctx().tracking_all();
    let root = loss(model, &mut ctx).unwrap();
    ctx.tape.backward(root).unwrap();
    let grads = ctx.grads();
    drop(ctx);
    let eval = |m: &HiveModel| {
        let mut c = m.ctx();
        let v = loss(m, &mut c).unwrap();
        c.tape.value(v)[0]
    };
    let mut work = model.clone();
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let n = model.params.get(&name).unwrap().numel();
        let g = grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(coords).max(1);
        for i in (0..n).step_by(stride) {
            let x = model.params.get(&name).unwrap().data()[i];
            let h = 1e-5 * x.abs().max(1.0);
            work.params.get_mut(&name).unwrap().data_mut()[i] = x + h;
            let plus = eval(&work);
            work.params.get_mut(&name).unwrap().data_mut()[i] = x - h;
            let minus = eval(&work);
            work.params.get_mut(&name).unwrap().data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(g[i], numeric, 1e-3);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {} numeric {numeric}", g[i]));
            }
        }
    }
    worst
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = randn(&mut rng(seed ^ 0xABCD), &shape);
    let rv = tape.constant(&r);
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

/// One differentiable-op test case per name: random inputs plus a scalar-valued closure.
pub fn op_case(name: &str, seed: u64) -> (Vec<Tensor>, Build) {
    let mut r = rng(seed);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let s = seed;
    match name {
        "matmul" => (
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[k, n])],
            Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                probe(t, o, s)
            }),
        ),
        "matmul_t" => (
            vec![randn(&mut r, &[m, k]), randn(&mut r, &[n, k])],
            Box::new(move |t, v| {
                let o = t.matmul_t(v[0], v[1])?;
                probe(t, o, s)
            }),
        ),
        "transpose" => (
            vec![randn(&mut r, &[m, n])],
            Box::new(move |t, v| {
                let o = t.transpose(v[0])?;
                probe(t, o, s)
            }),
        ),
        "add" => (
            vec![randn(&mut r, &[m, n]), randn(&mut r, &[m, n])],
            Box::new(move |t, v| {
                let o = t.add(v[0], v[1])?;
                probe(t, o, s)
            }),
        ),
        "mul" => (
            vec![randn(&mut r, &[m, n]), randn(&mut r, &[m, n])],
            Box::new(move |t, v| {
                let o = t.mul(v[0], v[1])?;
                probe(t, o, s)
            }),
        ),
        "add_bias" => (
            vec![randn(&mut r, &[m, n]), randn(&mut r, &[n])],
            Box::new(move |t, v| {
                let o = t.add_bias(v[0], v[1])?;
                probe(t, o, s)
            }),
        ),
        "scale" => (
            vec![randn(&mut r, &[m, n])],
            Box::new(move |t, v| {
                let o = t.scale(v[0], -1.7);
                probe(t, o, s)
            }),
        ),
        "scale_by" => (
            vec![randn(&mut r, &[m, n]), randn(&mut r, &[1])],
            Box::new(move |t, v| {
                let o = t.scale_by(v[0], v[1])?;
                probe(t, o, s)
            }),
        ),
        "layernorm" => (
            vec![
                randn(&mut r, &[m, n + 1]),
                randn(&mut r, &[n + 1]),
                randn(&mut r, &[n + 1]),
            ],
            Box::new(move |t, v| {
                let o = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                probe(t, o, s)
            }),
        ),
        "gelu" => (
            vec![Tensor::new(vec![m, n], (0..m * n).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap()],
            Box::new(move |t, v| {
                let o = t.gelu(v[0]);
                probe(t, o, s)
            }),
        ),
        "softmax" => (
            vec![randn(&mut r, &[m, n])],
            Box::new(move |t, v| {
                let o = t.softmax_rows(v[0], None)?;
                probe(t, o, s)
            }),
        ),
        "softmax_causal" => {
            let q = m.max(n);
            (
                vec![randn(&mut r, &[q, q])],
                Box::new(move |t, v| {
                    let mask = hive_core::nn::causal_mask(q);
                    let o = t.softmax_rows(v[0], Some(&mask))?;
                    probe(t, o, s)
                }),
            )
        }
        "cross_entropy" => {
            let vocab = n + 1;
            let targets: Vec<usize> = (0..m + 1)
                .map(|i| {
                    if i == 0 && m > 0 {
                        IGNORE_INDEX
                    } else {
                        r.random_range(0..vocab)
                    }
                })
                .collect();
            (
                vec![randn(&mut r, &[m + 1, vocab])],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets, IGNORE_INDEX)),
            )
        }
        "slice_cols" => {
            let cols = n + 2;
            (
                vec![randn(&mut r, &[m, cols])],
                Box::new(move |t, v| {
                    let o = t.slice_cols(v[0], 1, cols)?;
                    probe(t, o, s)
                }),
            )
        }
        "concat_cols" => (
            vec![randn(&mut r, &[m, n]), randn(&mut r, &[m, k])],
            Box::new(move |t, v| {
                let o = t.concat_cols(&[v[0], v[1]])?;
                probe(t, o, s)
            }),
        ),
        "slice_rows" => {
            let rows = m + 2;
            (
                vec![randn(&mut r, &[rows, n])],
                Box::new(move |t, v| {
                    let o = t.slice_rows(v[0], 1, rows - 1)?;
                    probe(t, o, s)
                }),
            )
        }
        "concat_rows" => (
            vec![randn(&mut r, &[m, n]), randn(&mut r, &[k, n])],
            Box::new(move |t, v| {
                let o = t.concat_rows(&[v[0], v[1]])?;
                probe(t, o, s)
            }),
        ),
        "gather_rows" => {
            let rows = m + 1;
            let ids: Vec<usize> = (0..k + 2).map(|_| r.random_range(0..rows)).collect();
            (
                vec![randn(&mut r, &[rows, n])],
                Box::new(move |t, v| {
                    let o = t.gather_rows(v[0], &ids)?;
                    probe(t, o, s)
                }),
            )
        }
        "sum" => (
            vec![randn(&mut r, &[m, n])],
            Box::new(move |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            }),
        ),
        "mean_rows" => (
            vec![randn(&mut r, &[m, n])],
            Box::new(move |t, v| {
                let o = t.mean_rows(v[0])?;
                probe(t, o, s)
            }),
        ),
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: [&str; 20] = [
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "mul",
    "add_bias",
    "scale",
    "scale_by",
    "layernorm",
    "gelu",
    "softmax",
    "softmax_causal",
    "cross_entropy",
    "slice_cols",
    "concat_cols",
    "slice_rows",
    "concat_rows",
    "gather_rows",
    "sum",
    "mean_rows",
];

/// Worst relative error of op `name` over `seeds` seeds.
pub fn op_gradcheck(name: &str, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (inputs, f) = op_case(name, seed);
        let rep = check_gradients(&inputs, f, GradCheckConfig::default()).unwrap();
        worst = worst.max(rep.max_rel_error);
    }
    worst
}
