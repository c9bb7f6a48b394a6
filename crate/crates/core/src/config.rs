//! Flat `key = value` run configuration with dotted section prefixes.
//!
//! ```text
//! # comment
//! seed = 0
//! encoder.depth = 8
//! stage2.peak_lr = 0.003
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, DatasetKind};
use crate::encoder::{select_layers, EncoderConfig, LayerSelection, Strategy};
use crate::error::{HiveError, Result};
use crate::lm::{LMConfig, DEFAULT_MAX_SEQ};
use crate::model::{Arch, ModelConfig};
use crate::params::ParamGroup;
use crate::tensor::Precision;
use crate::train::schedule::{groups, pretrain_groups, validate_pretrain, StageSchedule};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HiveError::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(HiveError::Config(format!("line {}: empty key", i + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(HiveError::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render_kv(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HiveError::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HiveError::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    /// Directory (or manifest) of an exported dataset; synthetic data when absent.
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub init_std: f64,
    pub encoder: EncoderConfig,
    pub lm: LMConfig,
    pub density: f64,
    pub strategy: Strategy,
    pub stages: [StageSchedule; 3],
    pub cls: StageSchedule,
    pub cls_augment: AugmentConfig,
    pub vlm: [StageSchedule; 2],
    pub data: DataSpec,
}

#[allow(clippy::too_many_arguments)]
fn sched(
    name: &str,
    trainable: BTreeSet<ParamGroup>,
    peak_lr: f64,
    min_lr: f64,
    warmup_iters: usize,
    total_iters: usize,
    clip_norm: f64,
    beta2: f64,
    weight_decay: f64,
    batch_size: usize,
) -> StageSchedule {
    StageSchedule {
        name: name.into(),
        trainable,
        peak_lr,
        min_lr,
        warmup_iters,
        total_iters,
        clip_norm,
        betas: (0.9, beta2),
        eps: 1e-8,
        weight_decay,
        batch_size,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::Standard,
            init_std: 0.05,
            encoder: EncoderConfig::default(),
            lm: LMConfig {
                vocab_size: 0,
                ..LMConfig::default()
            },
            density: 0.25,
            strategy: Strategy::Uniform,
            stages: [
                sched("stage1", pretrain_groups(1), 3e-3, 3e-4, 10, 300, 1.0, 0.999, 0.0, 8),
                sched("stage2", pretrain_groups(2), 3e-3, 3e-4, 20, 600, 10.0, 0.95, 0.0, 8),
                sched("stage3", pretrain_groups(3), 3e-4, 0.0, 3, 80, 10.0, 0.95, 0.0, 8),
            ],
            cls: sched(
                "cls",
                groups(&[ParamGroup::ClassifierHead]),
                5.0,
                0.0,
                3,
                200,
                3.0,
                0.999,
                0.01,
                32,
            ),
            cls_augment: AugmentConfig::default(),
            vlm: [
                sched(
                    "vlm_a",
                    groups(&[ParamGroup::Projector]),
                    1e-3,
                    0.0,
                    6,
                    200,
                    1.0,
                    0.999,
                    0.0,
                    8,
                ),
                sched(
                    "vlm_b",
                    groups(&[ParamGroup::Llm]),
                    1e-3,
                    0.0,
                    10,
                    300,
                    1.0,
                    0.999,
                    0.0,
                    8,
                ),
            ],
            data: DataSpec {
                kind: DatasetKind::Caption,
                n: 32,
                seed: 0,
                path: None,
            },
        }
    }
}

fn sched_kv(out: &mut Vec<(String, String)>, s: &StageSchedule) {
    let p = &s.name;
    let mut put = |k: &str, v: String| out.push((format!("{p}.{k}"), v));
    put("peak_lr", s.peak_lr.to_string());
    put("min_lr", s.min_lr.to_string());
    put("warmup_iters", s.warmup_iters.to_string());
    put("total_iters", s.total_iters.to_string());
    put("clip_norm", s.clip_norm.to_string());
    put("beta1", s.betas.0.to_string());
    put("beta2", s.betas.1.to_string());
    put("eps", s.eps.to_string());
    put("weight_decay", s.weight_decay.to_string());
    put("batch_size", s.batch_size.to_string());
}

fn sched_set(s: &mut StageSchedule, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "peak_lr" => s.peak_lr = num(key, v)?,
        "min_lr" => s.min_lr = num(key, v)?,
        "warmup_iters" => s.warmup_iters = num(key, v)?,
        "total_iters" => s.total_iters = num(key, v)?,
        "clip_norm" => s.clip_norm = num(key, v)?,
        "beta1" => s.betas.0 = num(key, v)?,
        "beta2" => s.betas.1 = num(key, v)?,
        "eps" => s.eps = num(key, v)?,
        "weight_decay" => s.weight_decay = num(key, v)?,
        "batch_size" => s.batch_size = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Encoder, LM and selection keys shared by run configs and checkpoint manifests.
pub fn model_kv(out: &mut Vec<(String, String)>, e: &EncoderConfig, lm: &LMConfig, density: f64, strategy: Strategy) {
    let mut put = |k: &str, v: String| out.push((k.to_string(), v));
    put("encoder.image_h", e.image_h.to_string());
    put("encoder.image_w", e.image_w.to_string());
    put("encoder.channels", e.channels.to_string());
    put("encoder.patch_size", e.patch_size.to_string());
    put("encoder.d_v", e.d_v.to_string());
    put("encoder.depth", e.depth.to_string());
    put("encoder.heads", e.heads.to_string());
    put("encoder.use_class_token", e.use_class_token.to_string());
    put("lm.d_l", lm.d_l.to_string());
    put("lm.depth", lm.depth.to_string());
    put("lm.heads", lm.heads.to_string());
    put("lm.max_seq", lm.max_seq.to_string());
    put("selection.density", density.to_string());
    put("selection.strategy", strategy.to_string());
}

/// Applies one encoder/LM/selection key; `Ok(false)` when the key is not one of them.
fn model_set(
    e: &mut EncoderConfig,
    lm: &mut LMConfig,
    density: &mut f64,
    strategy: &mut Strategy,
    key: &str,
    v: &str,
) -> Result<bool> {
    match key {
        "encoder.image_h" => e.image_h = num(key, v)?,
        "encoder.image_w" => e.image_w = num(key, v)?,
        "encoder.channels" => e.channels = num(key, v)?,
        "encoder.patch_size" => e.patch_size = num(key, v)?,
        "encoder.d_v" => e.d_v = num(key, v)?,
        "encoder.depth" => e.depth = num(key, v)?,
        "encoder.heads" => e.heads = num(key, v)?,
        "encoder.use_class_token" => e.use_class_token = boolean(key, v)?,
        "lm.d_l" => lm.d_l = num(key, v)?,
        "lm.depth" => lm.depth = num(key, v)?,
        "lm.heads" => lm.heads = num(key, v)?,
        "lm.max_seq" => lm.max_seq = num(key, v)?,
        "lm.vocab_size" => lm.vocab_size = num(key, v)?,
        "selection.density" => *density = num(key, v)?,
        "selection.strategy" => {
            *strategy = Strategy::parse(v).ok_or_else(|| HiveError::Config(format!("{key}: unknown strategy {v:?}")))?
        }
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("precision".to_string(), self.precision.name().to_string()),
            ("init_std".to_string(), self.init_std.to_string()),
        ];
        model_kv(&mut out, &self.encoder, &self.lm, self.density, self.strategy);
        for s in &self.stages {
            sched_kv(&mut out, s);
        }
        sched_kv(&mut out, &self.cls);
        let a = &self.cls_augment;
        out.push(("cls.augment".into(), a.enabled.to_string()));
        out.push(("cls.crop_scale_min".into(), a.scale.0.to_string()));
        out.push(("cls.crop_scale_max".into(), a.scale.1.to_string()));
        out.push(("cls.crop_ratio_min".into(), a.ratio.0.to_string()));
        out.push(("cls.crop_ratio_max".into(), a.ratio.1.to_string()));
        out.push(("cls.hflip_p".into(), a.hflip_p.to_string()));
        for s in &self.vlm {
            sched_kv(&mut out, s);
        }
        out.push(("data.kind".into(), self.data.kind.name().into()));
        out.push(("data.n".into(), self.data.n.to_string()));
        out.push(("data.seed".into(), self.data.seed.to_string()));
        if let Some(p) = &self.data.path {
            out.push(("data.path".into(), p.clone()));
        }
        out
    }

    pub fn to_text(&self) -> String {
        render_kv(&self.to_kv())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || HiveError::Config(format!("unknown key {key}"));
        match key {
            "seed" => self.seed = num(key, v)?,
            "precision" => {
                self.precision = Precision::parse(v).ok_or_else(|| HiveError::Config(format!("{key}: {v:?}")))?
            }
            "init_std" => self.init_std = num(key, v)?,
            "cls.augment" => self.cls_augment.enabled = boolean(key, v)?,
            "cls.crop_scale_min" => self.cls_augment.scale.0 = num(key, v)?,
            "cls.crop_scale_max" => self.cls_augment.scale.1 = num(key, v)?,
            "cls.crop_ratio_min" => self.cls_augment.ratio.0 = num(key, v)?,
            "cls.crop_ratio_max" => self.cls_augment.ratio.1 = num(key, v)?,
            "cls.hflip_p" => self.cls_augment.hflip_p = num(key, v)?,
            "data.kind" => {
                self.data.kind = DatasetKind::parse(v).ok_or_else(|| HiveError::Config(format!("{key}: {v:?}")))?
            }
            "data.n" => self.data.n = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,
            "data.path" => self.data.path = (!v.is_empty()).then(|| v.to_string()),
            _ => {
                if model_set(
                    &mut self.encoder,
                    &mut self.lm,
                    &mut self.density,
                    &mut self.strategy,
                    key,
                    v,
                )? {
                    return Ok(());
                }
                let (section, field) = key.split_once('.').ok_or_else(unknown)?;
                let s = match section {
                    "stage1" => &mut self.stages[0],
                    "stage2" => &mut self.stages[1],
                    "stage3" => &mut self.stages[2],
                    "cls" => &mut self.cls,
                    "vlm_a" => &mut self.vlm[0],
                    "vlm_b" => &mut self.vlm[1],
                    _ => return Err(unknown()),
                };
                if !sched_set(s, field, key, v)? {
                    return Err(unknown());
                }
            }
        }
        Ok(())
    }

    /// Defaults overridden by every key in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let mut lm = self.lm.clone();
        lm.vocab_size = lm.vocab_size.max(1);
        lm.validate()?;
        self.selection()?;
        validate_pretrain(&self.stages)?;
        self.cls.validate()?;
        self.cls_augment.validate()?;
        for s in &self.vlm {
            s.validate()?;
        }
        if self.vlm[0].trainable != groups(&[ParamGroup::Projector])
            || self.vlm[1].trainable != groups(&[ParamGroup::Llm])
        {
            return Err(HiveError::Schedule(
                "VLM sub-stages must train projector, then llm".into(),
            ));
        }
        if self.data.n == 0 {
            return Err(HiveError::Config("data.n must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(HiveError::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn selection(&self) -> Result<LayerSelection> {
        select_layers(self.encoder.depth, self.lm.depth, self.density, self.strategy)
    }

    pub fn model_config(&self, vocab_size: usize, arch: Arch) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            encoder: self.encoder.clone(),
            lm: LMConfig {
                vocab_size,
                ..self.lm.clone()
            },
            selection: self.selection()?,
            arch,
            num_classes: None,
            precision: self.precision,
            init_std: self.init_std,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        config_hash(&self.to_text())
    }
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serializes a model config as manifest keys.
pub fn model_config_kv(cfg: &ModelConfig) -> Vec<(String, String)> {
    let mut out = Vec::new();
    model_kv(
        &mut out,
        &cfg.encoder,
        &cfg.lm,
        cfg.selection.density,
        cfg.selection.strategy,
    );
    out.push(("lm.vocab_size".into(), cfg.lm.vocab_size.to_string()));
    out.push(("selection.pairs".into(), cfg.selection.pairs_text()));
    out.push((
        "model.arch".into(),
        match cfg.arch {
            Arch::Hierarchical => "hierarchical".into(),
            Arch::Concat { tap } => format!("concat:{tap}"),
        },
    ));
    out.push((
        "model.num_classes".into(),
        cfg.num_classes.map_or("none".into(), |c| c.to_string()),
    ));
    out.push(("precision".into(), cfg.precision.name().into()));
    out.push(("init_std".into(), cfg.init_std.to_string()));
    out.push(("seed".into(), cfg.seed.to_string()));
    out
}

/// Rebuilds a model config from manifest keys, ignoring unrelated keys.
pub fn model_config_from_kv(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut e = EncoderConfig::default();
    let mut lm = LMConfig {
        max_seq: DEFAULT_MAX_SEQ,
        ..LMConfig::default()
    };
    let mut density = 0.25;
    let mut strategy = Strategy::Uniform;
    let mut arch = Arch::Hierarchical;
    let mut num_classes = None;
    let mut precision = Precision::Standard;
    let mut init_std = 0.05;
    let mut seed = 0;
    let mut pairs_text = None;
    for (k, v) in pairs {
        if model_set(&mut e, &mut lm, &mut density, &mut strategy, k, v)? {
            continue;
        }
        match k.as_str() {
            "selection.pairs" => pairs_text = Some(v.clone()),
            "model.arch" => {
                arch = match v.split_once(':') {
                    Some(("concat", t)) => Arch::Concat { tap: num(k, t)? },
                    None if v == "hierarchical" => Arch::Hierarchical,
                    _ => return Err(HiveError::Config(format!("{k}: {v:?}"))),
                }
            }
            "model.num_classes" => num_classes = if v == "none" { None } else { Some(num(k, v)?) },
            "precision" => precision = Precision::parse(v).ok_or_else(|| HiveError::Config(format!("{k}: {v:?}")))?,
            "init_std" => init_std = num(k, v)?,
            "seed" => seed = num(k, v)?,
            _ => {}
        }
    }
    let selection = select_layers(e.depth, lm.depth, density, strategy)?;
    if let Some(p) = pairs_text {
        if p != selection.pairs_text() {
            return Err(HiveError::Config(format!(
                "recorded pairs {p} disagree with the recomputed selection {}",
                selection.pairs_text()
            )));
        }
    }
    let cfg = ModelConfig {
        encoder: e,
        lm,
        selection,
        arch,
        num_classes,
        precision,
        init_std,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}
