//! On-disk dataset layout: `manifest.jsonl` plus 8-bit PNG images.
//!
//! Each manifest line is `{"image": "<file>", "caption": "<text>", "label": <int>?}`
//! with the image path relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::synthetic::CaptionSample;
use crate::error::{HiveError, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    image: String,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `[H×W×C]` tensor with C of 1 or 3 as an 8-bit PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || !(shape[2] == 1 || shape[2] == 3) {
        return Err(HiveError::Data(format!("cannot encode image of shape {shape:?}")));
    }
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    if shape[2] == 3 {
        RgbImage::from_raw(w, h, bytes).expect("buffer size").save(path)?;
    } else {
        GrayImage::from_raw(w, h, bytes).expect("buffer size").save(path)?;
    }
    Ok(())
}

/// Decodes an image, resizes it bilinearly to `h×w` if needed and scales to [0, 1].
pub fn load_image(path: &Path, h: usize, w: usize, channels: usize) -> Result<Tensor> {
    let img = image::open(path)?;
    let img = if img.width() as usize != w || img.height() as usize != h {
        img.resize_exact(w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    let raw = match channels {
        1 => DynamicImage::ImageLuma8(img.to_luma8()).into_bytes(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(HiveError::Data(format!("unsupported channel count {c}"))),
    };
    Tensor::new(
        vec![h, w, channels],
        raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

/// Writes `samples` as `<dir>/manifest.jsonl` plus one PNG per sample.
pub fn export_dataset(samples: &[CaptionSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join(MANIFEST))?;
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:06}.png");
        save_png(&s.image, &dir.join(&file))?;
        let rec = Record {
            image: file,
            caption: s.caption.clone(),
            label: s.class_label,
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Loads a dataset given its directory or its manifest file.
pub fn load_dataset(path: &Path, h: usize, w: usize, channels: usize) -> Result<Vec<CaptionSample>> {
    let (manifest, root): (PathBuf, PathBuf) = if path.is_dir() {
        (path.join(MANIFEST), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    };
    let file = fs::File::open(&manifest).map_err(|e| HiveError::Ingestion {
        line: 0,
        msg: format!("{}: {e}", manifest.display()),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| HiveError::Ingestion { line: lineno, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.caption.trim().is_empty() {
            return Err(err("empty caption".into()));
        }
        let image =
            load_image(&root.join(&rec.image), h, w, channels).map_err(|e| err(format!("{}: {e}", rec.image)))?;
        out.push(CaptionSample {
            image,
            caption: rec.caption,
            class_label: rec.label,
        });
    }
    if out.is_empty() {
        return Err(HiveError::Data(format!("{} lists no samples", manifest.display())));
    }
    Ok(out)
}
