//! Command-line surface: `hive <subcommand> [--config F] [--seed N] --out DIR`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{attention_maps, export_attention_maps, export_gradient_map, flop_report, gradient_map};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Manifest, VERSION};
use crate::config::{parse_kv, RunConfig};
use crate::data::{
    export_dataset, gen_synthetic, grammar_tokenizer, load_dataset, load_image, CaptionSample, DatasetKind,
    SyntheticSpec,
};
use crate::error::{HiveError, Result};
use crate::lm::TokenSequence;
use crate::model::{Arch, HiveModel};
use crate::tokenizer::Tokenizer;
use crate::train::{caption, caption_matches, encode_samples, finetune_classifier, finetune_vlm, run_pretrain, Output};

pub const LOCK_FILE: &str = ".hive.lock";
pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const RESOLVED_CONFIG: &str = "config.cfg";

#[derive(Parser, Debug)]
#[command(
    name = "hive",
    version,
    about = "Hierarchical vision-language cross-attention pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key = value config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing, locked while the command runs).
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FlopMode {
    Hier,
    Sa,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset as manifest.jsonl plus PNGs.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Three-stage pre-training; writes stage1..3 checkpoints and metrics.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Linear probe on the frozen encoder.
    FinetuneCls {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint; a fresh model is used when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Concat-mode tuning: projector, then language model.
    FinetuneVlm {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from; a fresh model is used when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// FLOP reports for the hierarchical model and/or the self-attention baseline.
    AnalyzeFlops {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        mode: FlopMode,
        /// Text tokens per forward.
        #[arg(long, default_value_t = 16)]
        n_text: usize,
    },
    /// Per-layer gradient maps of the caption loss.
    GradMap {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// PNG image.
        #[arg(long)]
        image: PathBuf,
        /// Caption the loss is taken over.
        #[arg(long)]
        caption: String,
        /// Detach the encoder stack above this layer.
        #[arg(long)]
        stop_grad_above: Option<usize>,
    },
    /// Cross-attention maps for selected caption tokens.
    AttnMap {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// PNG image.
        #[arg(long)]
        image: PathBuf,
        /// Caption fed as text input.
        #[arg(long)]
        caption: String,
        /// Comma-separated input positions; all positions when omitted.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<usize>,
    },
    /// Greedy captions for one or more images.
    Caption {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// One or more PNG images.
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::FinetuneCls { .. } => "finetune-cls",
            Command::FinetuneVlm { .. } => "finetune-vlm",
            Command::AnalyzeFlops { .. } => "analyze-flops",
            Command::GradMap { .. } => "grad-map",
            Command::AttnMap { .. } => "attn-map",
            Command::Caption { .. } => "caption",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Pretrain { common }
            | Command::FinetuneCls { common, .. }
            | Command::FinetuneVlm { common, .. }
            | Command::AnalyzeFlops { common, .. }
            | Command::GradMap { common, .. }
            | Command::AttnMap { common, .. }
            | Command::Caption { common, .. } => common,
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HiveError::Request(format!(
                "{} is locked by another run ({})",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Parses `argv` (program name first) and runs it; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("hive {}: {e}", cli.command.name());
            1
        }
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.config {
        for (k, v) in parse_kv(&fs::read_to_string(p)?)? {
            cfg.set(&k, &v)?;
        }
    }
    for kv in &c.set {
        for (k, v) in parse_kv(kv)? {
            cfg.set(&k, &v)?;
        }
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: &Command, argv: &[std::ffi::OsString]) -> Result<()> {
    let common = cmd.common();
    let cfg = resolve_config(common)?;
    let out = common.out.as_path();
    let _lock = DirLock::acquire(out)?;
    let started = Instant::now();
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let mut manifest = Manifest::default();
    manifest.set("version", VERSION);
    manifest.set("command", cmd.name());
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    manifest.set("argv", args.join(" "));
    manifest.set("config", RESOLVED_CONFIG);
    manifest.set("config_hash", cfg.hash());
    manifest.set("seed", cfg.seed);
    manifest.save(&out.join(RUN_MANIFEST))?;

    match cmd {
        Command::GenData { .. } => {
            let data = dataset(&cfg, &cfg.encoder, None)?;
            export_dataset(&data, out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Pretrain { .. } => {
            let data = dataset(&cfg, &cfg.encoder, None)?;
            let tok = tokenizer_for(&cfg, &data);
            let mut model = HiveModel::new(cfg.model_config(vocab_size(&cfg, &tok)?, Arch::Hierarchical)?)?;
            let encoded = encode_samples(&data, &tok, cfg.lm.max_seq)?;
            let mut m = manifest.clone();
            m.set("data.n", data.len());
            let report = run_pretrain(
                &mut model,
                &encoded,
                &cfg.stages,
                cfg.seed,
                Some(&Output {
                    dir: out,
                    tokenizer: &tok,
                    manifest: m,
                }),
            )?;
            for (i, l) in report.stage_losses.iter().enumerate() {
                println!("stage{}: mean token loss {l:.4}", i + 1);
            }
            let hits = caption_matches(&model, &tok, &encoded, model.native_mode())?;
            println!("greedy captions matching: {hits}/{}", encoded.len());
        }
        Command::FinetuneCls { ckpt, .. } => {
            let (base, tok) = model_or_fresh(&cfg, ckpt.as_deref())?;
            let data = dataset(&cfg, &base.cfg.encoder, Some(DatasetKind::Classify))?;
            let num_classes = data
                .iter()
                .filter_map(|s| s.class_label)
                .max()
                .map_or(0, |m| m + 1)
                .max(2);
            let mut aug = cfg.cls_augment;
            let mut m = manifest.clone();
            // Synthetic labels are left/right layouts, which a horizontal flip swaps.
            if cfg.data.path.is_none() && aug.enabled && aug.hflip_p > 0.0 {
                eprintln!("note: horizontal flips disabled for synthetic left/right labels");
                aug.hflip_p = 0.0;
                m.set("cls.hflip_p.effective", 0);
            }
            let report = finetune_classifier(&base, &data, num_classes, &cfg.cls, &aug, cfg.seed)?;
            m.set("accuracy", report.accuracy);
            save_checkpoint(&out.join("checkpoint"), &report.model, None, Some(&tok), &m)?;
            report.metrics.save(&out.join("metrics.csv"))?;
            println!("train accuracy {:.4}", report.accuracy);
        }
        Command::FinetuneVlm { ckpt, .. } => {
            let (base, tok) = model_or_fresh(&cfg, ckpt.as_deref())?;
            let data = dataset(&cfg, &base.cfg.encoder, None)?;
            let encoded = encode_samples(&data, &tok, base.cfg.lm.max_seq)?;
            let report = finetune_vlm(&base, &encoded, &cfg.vlm, cfg.seed)?;
            let hits = caption_matches(&report.model, &tok, &encoded, report.model.native_mode())?;
            let mut m = manifest.clone();
            m.set("caption_matches", format!("{hits}/{}", encoded.len()));
            save_checkpoint(&out.join("checkpoint"), &report.model, None, Some(&tok), &m)?;
            report.metrics.save(&out.join("metrics.csv"))?;
            println!("greedy captions matching: {hits}/{}", encoded.len());
        }
        Command::AnalyzeFlops { mode, n_text, .. } => {
            let tok = grammar_tokenizer();
            let hier = cfg.model_config(vocab_size(&cfg, &tok)?, Arch::Hierarchical)?;
            let mut wanted = Vec::new();
            if matches!(mode, FlopMode::Hier | FlopMode::Both) {
                wanted.push(("hier", hier.clone()));
            }
            if matches!(mode, FlopMode::Sa | FlopMode::Both) {
                let mut sa = hier.clone();
                sa.arch = Arch::Concat {
                    tap: hier.encoder.depth,
                };
                wanted.push(("sa", sa));
            }
            for (name, mc) in wanted {
                let t = Instant::now();
                let report = flop_report(&HiveModel::new(mc)?, *n_text)?;
                let path = out.join(format!("flops_{name}.json"));
                fs::write(&path, report.to_json()?)?;
                println!(
                    "{name}: measured {} MACs (llm-internal {}), analytic self {:.3e} cross {:.3e}, {:.2}s -> {}",
                    report.measured_total,
                    report.measured_llm_internal,
                    report.analytic_self_attn,
                    report.analytic_cross_attn,
                    t.elapsed().as_secs_f64(),
                    path.display()
                );
            }
        }
        Command::GradMap {
            ckpt,
            image,
            caption: text,
            stop_grad_above,
            ..
        } => {
            let (model, tok) = model_or_fresh(&cfg, Some(ckpt))?;
            let img = checkpoint_image(&model, image)?;
            let seq = caption_sequence(&model, &tok, text)?;
            let map = gradient_map(&model, &img, &seq, *stop_grad_above)?;
            let files = export_gradient_map(&map, out)?;
            let zero = map.zero_layers();
            let mut report = Manifest::default();
            report.set("layers", map.layers.len());
            report.set("grid", format!("{}x{}", map.grid_h, map.grid_w));
            report.set(
                "zero_layers",
                zero.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            );
            report.save(&out.join("grad_map_report.txt"))?;
            println!("wrote {} files; zero-gradient layers: {zero:?}", files.len());
        }
        Command::AttnMap {
            ckpt,
            image,
            caption: text,
            tokens,
            ..
        } => {
            let (model, tok) = model_or_fresh(&cfg, Some(ckpt))?;
            let img = checkpoint_image(&model, image)?;
            let seq = caption_sequence(&model, &tok, text)?;
            let positions = if tokens.is_empty() {
                (0..seq.ids.len()).collect()
            } else {
                tokens.clone()
            };
            let maps = attention_maps(&model, &tok, &img, &seq.ids, &positions)?;
            let files = export_attention_maps(&maps, &img, out)?;
            println!("wrote {} records to {}", maps.records.len(), files[0].display());
        }
        Command::Caption { ckpt, image, .. } => {
            let (model, tok) = model_or_fresh(&cfg, Some(ckpt))?;
            let mut lines = String::new();
            for p in image {
                let img = checkpoint_image(&model, p)?;
                let c = caption(&model, &tok, &img, model.native_mode())?;
                println!("{}\t{c}", p.display());
                lines.push_str(&format!("{}\t{c}\n", p.display()));
            }
            fs::write(out.join("captions.txt"), lines)?;
        }
    }
    let mut done = Manifest::load(&out.join(RUN_MANIFEST))?;
    done.set("elapsed_s", format!("{:.3}", started.elapsed().as_secs_f64()));
    done.save(&out.join(RUN_MANIFEST))
}

fn dataset(
    cfg: &RunConfig,
    enc: &crate::encoder::EncoderConfig,
    kind: Option<DatasetKind>,
) -> Result<Vec<CaptionSample>> {
    match &cfg.data.path {
        Some(p) => load_dataset(Path::new(p), enc.image_h, enc.image_w, enc.channels),
        None => gen_synthetic(
            cfg.data.n,
            cfg.data.seed,
            SyntheticSpec {
                image_h: enc.image_h,
                image_w: enc.image_w,
                channels: enc.channels,
                kind: kind.unwrap_or(cfg.data.kind),
            },
        ),
    }
}

/// The closed grammar for synthetic data, otherwise the words of the loaded captions.
fn tokenizer_for(cfg: &RunConfig, data: &[CaptionSample]) -> Tokenizer {
    match cfg.data.path {
        None => grammar_tokenizer(),
        Some(_) => Tokenizer::from_corpus(data.iter().map(|s| s.caption.as_str())),
    }
}

fn vocab_size(cfg: &RunConfig, tok: &Tokenizer) -> Result<usize> {
    match cfg.lm.vocab_size {
        0 => Ok(tok.vocab_size()),
        v if v >= tok.vocab_size() => Ok(v),
        v => Err(HiveError::Config(format!(
            "lm.vocab_size = {v} is smaller than the tokenizer's {}",
            tok.vocab_size()
        ))),
    }
}

fn model_or_fresh(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<(HiveModel, Tokenizer)> {
    match ckpt {
        Some(dir) => {
            let loaded = load_checkpoint(dir)?;
            let tok = loaded.tokenizer.unwrap_or_else(grammar_tokenizer);
            if tok.vocab_size() > loaded.model.cfg.lm.vocab_size {
                return Err(HiveError::Format("checkpoint vocabulary exceeds the model's".into()));
            }
            Ok((loaded.model, tok))
        }
        None => {
            let tok = grammar_tokenizer();
            let model = HiveModel::new(cfg.model_config(vocab_size(cfg, &tok)?, Arch::Hierarchical)?)?;
            Ok((model, tok))
        }
    }
}

fn checkpoint_image(model: &HiveModel, path: &Path) -> Result<crate::tensor::Tensor> {
    let e = &model.cfg.encoder;
    load_image(path, e.image_h, e.image_w, e.channels)
}

fn caption_sequence(model: &HiveModel, tok: &Tokenizer, text: &str) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(HiveError::Request("caption must be nonempty".into()));
    }
    TokenSequence::with_prompt(&[tok.bos()], &tok.encode(text), Some(tok.eos()), model.cfg.lm.max_seq)
}
