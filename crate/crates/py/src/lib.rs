//! Python bindings: layer selection, schedules, FLOP accounting, synthetic
//! data, and a model handle for forwards, captions and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use hive_core::analysis::{self, FlopDims};
use hive_core::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use hive_core::config::RunConfig;
use hive_core::data::{gen_synthetic as synth, grammar_tokenizer, DatasetKind, SyntheticSpec};
use hive_core::encoder::{select_layers as select, Strategy};
use hive_core::lm::TokenSequence;
use hive_core::model::ForwardOptions;
use hive_core::params::ParamGroup;
use hive_core::tokenizer::Tokenizer;
use hive_core::train::schedule::{groups, StageSchedule};
use hive_core::{Arch, HiveError, HiveModel, Mode, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: HiveError) -> PyErr {
    match e {
        HiveError::Io(_) => PyIOError::new_err(e.to_string()),
        HiveError::Divergence { .. } | HiveError::Wiring(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(pixels: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    Tensor::new(vec![shape.0, shape.1, shape.2], pixels).map_err(py_err)
}

/// `(encoder_layer, llm_layer)` pairs, both 1-based.
#[pyfunction]
#[pyo3(signature = (l_v, l_l, density = 0.25, strategy = "uniform"))]
fn select_layers(l_v: usize, l_l: usize, density: f64, strategy: &str) -> PyResult<Vec<(usize, usize)>> {
    let s = Strategy::parse(strategy).ok_or_else(|| PyValueError::new_err(format!("unknown strategy {strategy:?}")))?;
    Ok(select(l_v, l_l, density, s).map_err(py_err)?.pairs)
}

/// Warmup-then-cosine learning rate at iteration `iter`.
#[pyfunction]
#[pyo3(signature = (iter, peak_lr, min_lr, warmup_iters, total_iters))]
fn lr_at(iter: usize, peak_lr: f64, min_lr: f64, warmup_iters: usize, total_iters: usize) -> PyResult<f64> {
    let s = StageSchedule {
        name: "python".into(),
        trainable: groups(&[ParamGroup::Projector]),
        peak_lr,
        min_lr,
        warmup_iters,
        total_iters,
        clip_norm: 1.0,
        betas: (0.9, 0.999),
        eps: 1e-8,
        weight_decay: 0.0,
        batch_size: 1,
    };
    s.validate().map_err(py_err)?;
    s.lr_at(iter).map_err(py_err)
}

/// Analytic self-attention and cross-attention costs in MACs.
#[pyfunction]
fn analytic_flops(l_l: usize, l_s: usize, n_v: usize, n_t: usize, d: usize) -> BTreeMap<&'static str, f64> {
    let dims = FlopDims { l_l, l_s, n_v, n_t, d };
    BTreeMap::from([
        ("self_attn", analysis::analytic_self_attn(&dims)),
        ("cross_attn", analysis::analytic_cross_attn(&dims)),
    ])
}

#[pyclass(frozen, module = "hive")]
struct Sample {
    #[pyo3(get)]
    caption: String,
    #[pyo3(get)]
    label: Option<usize>,
    #[pyo3(get)]
    shape: (usize, usize, usize),
    /// Row-major `H×W×C` values in `[0, 1]`.
    #[pyo3(get)]
    pixels: Vec<f64>,
}

#[pymethods]
impl Sample {
    fn __repr__(&self) -> String {
        format!(
            "Sample(caption={:?}, label={:?}, shape={:?})",
            self.caption, self.label, self.shape
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n, seed, image_h = 16, image_w = 16, kind = "caption"))]
fn gen_synthetic(n: usize, seed: u64, image_h: usize, image_w: usize, kind: &str) -> PyResult<Vec<Sample>> {
    let kind = DatasetKind::parse(kind).ok_or_else(|| PyValueError::new_err(format!("unknown kind {kind:?}")))?;
    let spec = SyntheticSpec {
        image_h,
        image_w,
        channels: 3,
        kind,
    };
    Ok(synth(n, seed, spec)
        .map_err(py_err)?
        .into_iter()
        .map(|s| Sample {
            caption: s.caption,
            label: s.class_label,
            shape: (image_h, image_w, 3),
            pixels: s.image.data().to_vec(),
        })
        .collect())
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    hive_core::cli::run(std::iter::once("hive".to_string()).chain(args))
}

#[pyclass(module = "hive")]
struct Model {
    inner: HiveModel,
    tokenizer: Tokenizer,
}

#[pymethods]
impl Model {
    /// `config` is key = value text over the defaults. `tap` selects the
    /// self-attention baseline fed from that encoder layer.
    #[new]
    #[pyo3(signature = (config = "", seed = None, tap = None))]
    fn new(config: &str, seed: Option<u64>, tap: Option<usize>) -> PyResult<Self> {
        let mut run = RunConfig::parse(config).map_err(py_err)?;
        if let Some(s) = seed {
            run.seed = s;
        }
        run.validate().map_err(py_err)?;
        let tokenizer = grammar_tokenizer();
        let vocab = match run.lm.vocab_size {
            0 => tokenizer.vocab_size(),
            v => v,
        };
        let arch = tap.map_or(Arch::Hierarchical, |tap| Arch::Concat { tap });
        let inner = HiveModel::new(run.model_config(vocab, arch).map_err(py_err)?).map_err(py_err)?;
        Ok(Model { inner, tokenizer })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let loaded = load_checkpoint(Path::new(dir)).map_err(py_err)?;
        Ok(Model {
            inner: loaded.model,
            tokenizer: loaded.tokenizer.unwrap_or_else(grammar_tokenizer),
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        save_checkpoint(
            Path::new(dir),
            &self.inner,
            None,
            Some(&self.tokenizer),
            &Manifest::default(),
        )
        .map_err(py_err)
    }

    #[getter]
    fn pairs(&self) -> Vec<(usize, usize)> {
        self.inner.cfg.selection.pairs.clone()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.native_mode().name()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.cfg.lm.vocab_size
    }

    /// Parameter count, optionally of one group (`encoder`, `projector`, ...).
    #[pyo3(signature = (group = None))]
    fn num_params(&self, group: Option<&str>) -> PyResult<usize> {
        match group {
            None => Ok(self.inner.params.total_count()),
            Some(g) => {
                let g = ParamGroup::parse(g).ok_or_else(|| PyValueError::new_err(format!("unknown group {g:?}")))?;
                Ok(self.inner.params.count(g))
            }
        }
    }

    fn set_gates(&mut self, value: f64) -> PyResult<()> {
        self.inner.set_gates(value).map_err(py_err)
    }

    fn to_concat(&self) -> PyResult<Model> {
        Ok(Model {
            inner: self.inner.to_concat().map_err(py_err)?,
            tokenizer: self.tokenizer.clone(),
        })
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenizer.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.tokenizer.decode(&ids)
    }

    /// Per-position logits over `ids`; `mode` defaults to the model's own.
    #[pyo3(signature = (pixels, shape, ids, mode = None))]
    fn logits(
        &self,
        pixels: Vec<f64>,
        shape: (usize, usize, usize),
        ids: Vec<usize>,
        mode: Option<&str>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let mode = match mode {
            None => self.inner.native_mode(),
            Some(m) => Mode::parse(m).ok_or_else(|| PyValueError::new_err(format!("unknown mode {m:?}")))?,
        };
        let img = image(pixels, shape)?;
        let seq = TokenSequence::prompt_only(&ids);
        let mut ctx = self.inner.ctx();
        let out = self
            .inner
            .forward(
                &mut ctx,
                (mode != Mode::Plain).then_some(&img),
                &seq,
                mode,
                ForwardOptions::default(),
            )
            .map_err(py_err)?;
        let v = self.inner.cfg.lm.vocab_size;
        let rows = ctx.tape.value(out.logits);
        Ok(rows[out.prefix_len * v..].chunks(v).map(<[f64]>::to_vec).collect())
    }

    /// Greedy caption of one image.
    fn caption(&self, pixels: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<String> {
        let img = image(pixels, shape)?;
        hive_core::train::caption(&self.inner, &self.tokenizer, &img, self.inner.native_mode()).map_err(py_err)
    }

    /// Instrumented MACs per component for one forward over `ids`.
    fn measured_flops(
        &self,
        pixels: Vec<f64>,
        shape: (usize, usize, usize),
        ids: Vec<usize>,
    ) -> PyResult<BTreeMap<String, u64>> {
        let img = image(pixels, shape)?;
        let m = analysis::measured_flops(&self.inner, Some(&img), &ids, self.inner.native_mode()).map_err(py_err)?;
        Ok(m.into_iter().map(|(c, v)| (c.name().to_string(), v)).collect())
    }

    /// Full FLOP report as JSON text.
    #[pyo3(signature = (n_text = 16))]
    fn flop_report(&self, n_text: usize) -> PyResult<String> {
        analysis::flop_report(&self.inner, n_text)
            .and_then(|r| r.to_json())
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, pairs={:?}, params={})",
            self.mode(),
            self.inner.cfg.selection.pairs,
            self.inner.params.total_count()
        )
    }
}

#[pymodule]
pub fn hive(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(select_layers, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_flops, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Sample>()?;
    m.add_class::<Model>()?;
    Ok(())
}
