//! Checkpoint directories: named parameter map, optimizer state, manifest and vocabulary.
//!
//! Parameter file: magic `HVPM`, u16 version, u64 entry count, then per entry a
//! u32 name length, the UTF-8 name and one tensor record. Optimizer file: magic
//! `HVOP`, u16 version, u64 step, u64 entry count, then per entry the name and
//! two tensor records (first and second moments).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{model_config_from_kv, model_config_kv, parse_kv, render_kv};
use crate::error::{HiveError, Result};
use crate::model::HiveModel;
use crate::params::ParamStore;
use crate::tensor::{DType, Precision, Tensor};
use crate::tokenizer::Tokenizer;
use crate::train::optim::{Moments, OptimizerState};

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FORMAT_VERSION: u16 = 1;
pub const VERSION: &str = concat!("hive-core ", env!("CARGO_PKG_VERSION"));

/// Ordered `key = value` text file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn extend(&mut self, pairs: &[(String, String)]) {
        for (k, v) in pairs {
            self.set(k, v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| HiveError::Format(format!("manifest has no {key}")))
    }

    pub fn to_text(&self) -> String {
        render_kv(&self.entries)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Manifest {
            entries: parse_kv(text)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| HiveError::Format("parameter name is not UTF-8".into()))
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(HiveError::Format(format!("bad magic {m:?}, expected {magic:?}")));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let v = u16::from_le_bytes(v);
    if v != FORMAT_VERSION {
        return Err(HiveError::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_params<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    let dtype = store.precision().dtype();
    w.write_all(b"HVPM")?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.iter() {
        write_name(w, name)?;
        t.write_to(w, dtype)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    read_header(r, b"HVPM")?;
    let n = read_u64(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name = read_name(r)?;
        let t = Tensor::read_from(r)?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn write_optimizer<W: Write>(w: &mut W, opt: &OptimizerState, precision: Precision) -> Result<()> {
    let dtype: DType = precision.dtype();
    w.write_all(b"HVOP")?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&opt.step.to_le_bytes())?;
    w.write_all(&(opt.moments.len() as u64).to_le_bytes())?;
    for (name, mom) in &opt.moments {
        write_name(w, name)?;
        Tensor::new(vec![mom.m.len()], mom.m.clone())?.write_to(w, dtype)?;
        Tensor::new(vec![mom.v.len()], mom.v.clone())?.write_to(w, dtype)?;
    }
    Ok(())
}

pub fn read_optimizer<R: Read>(r: &mut R) -> Result<OptimizerState> {
    read_header(r, b"HVOP")?;
    let step = read_u64(r)?;
    let n = read_u64(r)?;
    let mut moments = BTreeMap::new();
    for _ in 0..n {
        let name = read_name(r)?;
        let m = Tensor::read_from(r)?.into_data();
        let v = Tensor::read_from(r)?.into_data();
        moments.insert(name, Moments { m, v });
    }
    Ok(OptimizerState { step, moments })
}

/// Everything restored from a checkpoint directory.
#[derive(Debug)]
pub struct Loaded {
    pub model: HiveModel,
    pub optimizer: Option<OptimizerState>,
    pub tokenizer: Option<Tokenizer>,
    pub manifest: Manifest,
}

/// Writes `dir/{params.bin, manifest.txt}` plus the optimizer and vocabulary when given.
/// The model config keys are merged into `extra`.
pub fn save_checkpoint(
    dir: &Path,
    model: &HiveModel,
    optimizer: Option<&OptimizerState>,
    tokenizer: Option<&Tokenizer>,
    extra: &Manifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?);
    write_params(&mut w, &model.params)?;
    w.flush()?;
    if let Some(opt) = optimizer {
        let mut w = BufWriter::new(fs::File::create(dir.join(OPTIM_FILE))?);
        write_optimizer(&mut w, opt, model.params.precision())?;
        w.flush()?;
    } else if dir.join(OPTIM_FILE).exists() {
        fs::remove_file(dir.join(OPTIM_FILE))?;
    }
    if let Some(tok) = tokenizer {
        tok.save(&dir.join(VOCAB_FILE))?;
    }
    let mut manifest = Manifest::default();
    manifest.set("version", VERSION);
    manifest.extend(&model_config_kv(&model.cfg));
    manifest.extend(&extra.entries);
    manifest.save(&dir.join(MANIFEST_FILE))
}

pub fn load_checkpoint(dir: &Path) -> Result<Loaded> {
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let cfg = model_config_from_kv(&manifest.entries)?;
    let mut model = HiveModel::new(cfg)?;
    let stored = read_params(&mut BufReader::new(fs::File::open(dir.join(PARAMS_FILE))?))?;
    let expected: Vec<&String> = model.params.names().collect();
    let got: Vec<&String> = stored.keys().collect();
    if expected != got {
        return Err(HiveError::Format(format!(
            "checkpoint holds {} parameters, the recorded config builds {}",
            got.len(),
            expected.len()
        )));
    }
    for (name, t) in stored {
        if model.params.get(&name)?.shape() != t.shape() {
            return Err(HiveError::Format(format!("shape mismatch for {name}")));
        }
        model.params.insert(&name, t)?;
    }
    let optimizer = match dir.join(OPTIM_FILE) {
        p if p.exists() => Some(read_optimizer(&mut BufReader::new(fs::File::open(p)?))?),
        _ => None,
    };
    let tokenizer = match dir.join(VOCAB_FILE) {
        p if p.exists() => Some(Tokenizer::load(&p)?),
        _ => None,
    };
    Ok(Loaded {
        model,
        optimizer,
        tokenizer,
        manifest,
    })
}
