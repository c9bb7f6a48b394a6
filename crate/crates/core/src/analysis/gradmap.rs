//! Per-layer, per-patch magnitude of `∂loss/∂F_l` over the encoder stack.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::autograd::IGNORE_INDEX;
use crate::error::{HiveError, Result};
use crate::lm::TokenSequence;
use crate::model::{ForwardOptions, HiveModel, Mode};
use crate::tensor::Tensor;

pub const UPSCALE: u32 = 8;
pub const CSV_FILE: &str = "grad_map.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrid {
    /// Encoder depth `l` of `F_l`, 1-based.
    pub layer: usize,
    /// Row-major `[grid_h × grid_w]` L2 norms over channels.
    pub values: Vec<f64>,
}

impl LayerGrid {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Values divided by the layer maximum; an all-zero layer stays zero.
    pub fn normalized(&self) -> Vec<f64> {
        let m = self.max();
        if m > 0.0 {
            self.values.iter().map(|v| v / m).collect()
        } else {
            vec![0.0; self.values.len()]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub layers: Vec<LayerGrid>,
}

impl GradientMap {
    pub fn layer(&self, l: usize) -> Option<&LayerGrid> {
        self.layers.iter().find(|g| g.layer == l)
    }

    pub fn zero_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|g| g.is_zero()).map(|g| g.layer).collect()
    }
}

/// One forward/backward of the caption loss, then per-patch gradient norms of
/// every encoder layer. `stop_grad_above = Some(k)` detaches the stack above `k`.
pub fn gradient_map(
    model: &HiveModel,
    image: &Tensor,
    seq: &TokenSequence,
    stop_grad_above: Option<usize>,
) -> Result<GradientMap> {
    let mode = model.native_mode();
    if mode == Mode::Plain {
        return Err(HiveError::Request("gradient maps need a vision pathway".into()));
    }
    let e = &model.cfg.encoder;
    let (grid_h, grid_w) = e.grid();
    let skip = usize::from(e.use_class_token);
    let mut ctx = model.ctx().tracking_all();
    let opts = ForwardOptions {
        record_attention: false,
        stop_grad_above,
    };
    let out = model.forward(&mut ctx, Some(image), seq, mode, opts)?;
    let loss = ctx.tape.cross_entropy(out.logits, &out.targets, IGNORE_INDEX)?;
    ctx.tape.backward(loss)?;
    let features = out
        .vision
        .features()
        .ok_or_else(|| HiveError::Wiring("forward produced no encoder features".into()))?;
    let d_v = e.d_v;
    let mut layers = Vec::with_capacity(e.depth);
    for l in 1..=e.depth {
        let f = features
            .layer(l)
            .ok_or_else(|| HiveError::Lookup(format!("encoder layer {l}")))?;
        let values = match ctx.tape.grad(f) {
            Some(g) => (0..grid_h * grid_w)
                .map(|p| {
                    let row = &g[(p + skip) * d_v..(p + skip + 1) * d_v];
                    row.iter().map(|x| x * x).sum::<f64>().sqrt()
                })
                .collect(),
            None => vec![0.0; grid_h * grid_w],
        };
        layers.push(LayerGrid { layer: l, values });
    }
    Ok(GradientMap { grid_h, grid_w, layers })
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    layer: usize,
    row: usize,
    col: usize,
    grad_norm: f64,
    normalized: f64,
}

/// Renders one layer as 8-bit grayscale, nearest-neighbour upscaled.
pub fn render_layer(map: &GradientMap, grid: &LayerGrid) -> GrayImage {
    let norm = grid.normalized();
    let small = GrayImage::from_fn(map.grid_w as u32, map.grid_h as u32, |x, y| {
        let v = norm[y as usize * map.grid_w + x as usize];
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    imageops::resize(
        &small,
        map.grid_w as u32 * UPSCALE,
        map.grid_h as u32 * UPSCALE,
        imageops::FilterType::Nearest,
    )
}

pub fn layer_png_name(layer: usize) -> String {
    format!("layer_{layer:02}.png")
}

/// Writes `layer_NN.png` per layer plus the raw CSV; returns the written paths.
pub fn export_gradient_map(map: &GradientMap, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for g in &map.layers {
        let p = dir.join(layer_png_name(g.layer));
        render_layer(map, g).save(&p)?;
        paths.push(p);
    }
    let csv_path = dir.join(CSV_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for g in &map.layers {
        let norm = g.normalized();
        for (i, (&v, &n)) in g.values.iter().zip(&norm).enumerate() {
            w.serialize(Row {
                layer: g.layer,
                row: i / map.grid_w,
                col: i % map.grid_w,
                grad_norm: v,
                normalized: n,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    paths.push(csv_path);
    Ok(paths)
}

pub fn read_gradient_csv(path: &Path) -> Result<GradientMap> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut cells: Vec<Row> = Vec::new();
    for rec in r.deserialize() {
        cells.push(rec.map_err(csv_err)?);
    }
    let grid_h = cells.iter().map(|c| c.row + 1).max().unwrap_or(0);
    let grid_w = cells.iter().map(|c| c.col + 1).max().unwrap_or(0);
    let mut layers: Vec<LayerGrid> = Vec::new();
    for c in &cells {
        if layers.last().map(|g| g.layer) != Some(c.layer) {
            layers.push(LayerGrid {
                layer: c.layer,
                values: vec![0.0; grid_h * grid_w],
            });
        }
        let g = layers.last_mut().expect("pushed above");
        g.values[c.row * grid_w + c.col] = c.grad_norm;
    }
    Ok(GradientMap { grid_h, grid_w, layers })
}

pub(crate) fn csv_err(e: csv::Error) -> HiveError {
    HiveError::Format(format!("csv: {e}"))
}
