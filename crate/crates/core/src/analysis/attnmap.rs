//! Cross-attention weights of text tokens over vision tokens, per injection.
//!
//! CSV layout: `llm_layer,head,token_index,token_text,w0,w1,...` with one row
//! per (injection, head, requested token).

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};

use super::gradmap::csv_err;
use crate::error::{HiveError, Result};
use crate::model::{ForwardOptions, HiveModel, Mode};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

pub const CSV_FILE: &str = "attention.csv";
pub const OVERLAY_FILE: &str = "attention_grid.png";
/// Pixel scale of each overlay cell relative to the input image.
pub const OVERLAY_SCALE: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Rank of the injection among the selected pairs.
    pub llm_layer_rank: usize,
    pub llm_layer: usize,
    pub encoder_layer: usize,
    pub head: usize,
    pub token_index: usize,
    pub token_text: String,
    /// Softmax weights over every vision key (class token first when present).
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub grid_h: usize,
    pub grid_w: usize,
    pub has_class_token: bool,
    pub tokens: Vec<usize>,
    pub records: Vec<AttentionRecord>,
}

impl AttentionMaps {
    /// Head-averaged weights on the patch grid for one injection and token.
    pub fn patch_map(&self, rank: usize, token_index: usize) -> Option<Vec<f64>> {
        let rows: Vec<&AttentionRecord> = self
            .records
            .iter()
            .filter(|r| r.llm_layer_rank == rank && r.token_index == token_index)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let skip = usize::from(self.has_class_token);
        let n = self.grid_h * self.grid_w;
        let mut out = vec![0.0; n];
        for r in &rows {
            for (o, w) in out.iter_mut().zip(&r.weights[skip..skip + n]) {
                *o += w;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows.len() as f64);
        Some(out)
    }

    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.records.iter().map(|r| r.llm_layer_rank).collect();
        r.dedup();
        r
    }
}

/// Records the cross-attention weights of tokens `tokens` (indices into `ids`).
pub fn attention_maps(
    model: &HiveModel,
    tok: &Tokenizer,
    image: &Tensor,
    ids: &[usize],
    tokens: &[usize],
) -> Result<AttentionMaps> {
    if model.native_mode() != Mode::Hierarchical {
        return Err(HiveError::Request("attention maps need a hierarchical model".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= ids.len()) {
        return Err(HiveError::Request(format!(
            "token index {bad} outside a sequence of {} tokens",
            ids.len()
        )));
    }
    let mut ctx = model.ctx();
    let opts = ForwardOptions {
        record_attention: true,
        stop_grad_above: None,
    };
    let vision = model.encode_vision(&mut ctx, Some(image), Mode::Hierarchical, opts)?;
    let (_, injections) = model.decode(&mut ctx, ids, &vision, opts)?;
    let mut records = Vec::new();
    for inj in &injections {
        for (head, _) in inj.weights.heads.iter().enumerate() {
            for &t in tokens {
                records.push(AttentionRecord {
                    llm_layer_rank: inj.rank,
                    llm_layer: inj.llm_layer,
                    encoder_layer: inj.encoder_layer,
                    head,
                    token_index: t,
                    token_text: token_text(tok, ids[t]),
                    weights: inj.weights.row(head, t).to_vec(),
                });
            }
        }
    }
    let (grid_h, grid_w) = model.cfg.encoder.grid();
    Ok(AttentionMaps {
        grid_h,
        grid_w,
        has_class_token: model.cfg.encoder.use_class_token,
        tokens: tokens.to_vec(),
        records,
    })
}

/// Decoded word, or the raw vocabulary entry for specials.
fn token_text(tok: &Tokenizer, id: usize) -> String {
    let text = tok.decode(&[id]);
    if text.is_empty() {
        tok.token(id).unwrap_or_default().to_string()
    } else {
        text
    }
}

pub fn write_attention_csv(maps: &AttentionMaps, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let n_keys = maps.records.first().map_or(0, |r| r.weights.len());
    let mut header = vec![
        "llm_layer".to_string(),
        "head".into(),
        "token_index".into(),
        "token_text".into(),
    ];
    header.extend((0..n_keys).map(|i| format!("w{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in &maps.records {
        let mut row = vec![
            r.llm_layer.to_string(),
            r.head.to_string(),
            r.token_index.to_string(),
            r.token_text.clone(),
        ];
        row.extend(r.weights.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV back; `encoder_layer` and `llm_layer_rank` come from `pairs`.
pub fn read_attention_csv(path: &Path, pairs: &[(usize, usize)]) -> Result<Vec<AttentionRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| HiveError::Format(format!("attention csv row {}: bad {what}", i + 2));
        let field = |k: usize| rec.get(k).ok_or_else(|| bad("field count"));
        let llm_layer: usize = field(0)?.parse().map_err(|_| bad("llm_layer"))?;
        let rank = pairs
            .iter()
            .position(|p| p.1 == llm_layer)
            .ok_or_else(|| bad("llm_layer"))?;
        let weights = rec
            .iter()
            .skip(4)
            .map(|v| v.parse::<f64>().map_err(|_| bad("weight")))
            .collect::<Result<Vec<_>>>()?;
        out.push(AttentionRecord {
            llm_layer_rank: rank,
            llm_layer,
            encoder_layer: pairs[rank].0,
            head: field(1)?.parse().map_err(|_| bad("head"))?,
            token_index: field(2)?.parse().map_err(|_| bad("token_index"))?,
            token_text: field(3)?.to_string(),
            weights,
        });
    }
    Ok(out)
}

/// Grid of overlays: one row per injection (shallow to deep), one column per
/// requested token. Each cell is the image with the head-averaged map, scaled
/// by its maximum, blended into the red channel.
pub fn render_overlay(maps: &AttentionMaps, image: &Tensor) -> Result<RgbImage> {
    let shape = image.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ph, pw) = (h / maps.grid_h, w / maps.grid_w);
    let ranks = maps.ranks();
    let (cell_w, cell_h) = (w as u32 * OVERLAY_SCALE, h as u32 * OVERLAY_SCALE);
    let gap = 2;
    let mut out = RgbImage::new(
        maps.tokens.len() as u32 * (cell_w + gap),
        ranks.len() as u32 * (cell_h + gap),
    );
    for (row, &rank) in ranks.iter().enumerate() {
        for (col, &t) in maps.tokens.iter().enumerate() {
            let m = maps
                .patch_map(rank, t)
                .ok_or_else(|| HiveError::Lookup(format!("no weights for rank {rank}, token {t}")))?;
            let peak = m.iter().copied().fold(0.0, f64::max);
            let cell = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                let px = &image.data()[(y * w + x) * c..(y * w + x) * c + c];
                let lum = px.iter().sum::<f64>() / c as f64;
                let a = if peak > 0.0 {
                    m[(y / ph) * maps.grid_w + x / pw] / peak
                } else {
                    0.0
                };
                let g = 0.5 * lum;
                let to8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
                Rgb([to8(g + 0.5 * a), to8(g), to8(g)])
            });
            let big = imageops::resize(&cell, cell_w, cell_h, imageops::FilterType::Nearest);
            imageops::replace(
                &mut out,
                &big,
                (col as u32 * (cell_w + gap)) as i64,
                (row as u32 * (cell_h + gap)) as i64,
            );
        }
    }
    Ok(out)
}

pub fn export_attention_maps(maps: &AttentionMaps, image: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(CSV_FILE);
    write_attention_csv(maps, &csv_path)?;
    let png = dir.join(OVERLAY_FILE);
    render_overlay(maps, image)?.save(&png)?;
    Ok(vec![csv_path, png])
}
