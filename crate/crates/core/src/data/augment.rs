//! RandomResizedCrop and horizontal flip, seeded per (epoch, sample).

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HiveError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub hflip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale: (0.4, 1.0),
            ratio: (0.75, 1.33),
            hflip_p: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale;
        let (r0, r1) = self.ratio;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return Err(HiveError::Config(format!(
                "crop scale {:?} must satisfy 0 < lo <= hi <= 1",
                self.scale
            )));
        }
        if !(0.0 < r0 && r0 <= r1) {
            return Err(HiveError::Config(format!(
                "crop ratio {:?} must satisfy 0 < lo <= hi",
                self.ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return Err(HiveError::Config(format!("hflip_p {} outside [0, 1]", self.hflip_p)));
        }
        Ok(())
    }
}

/// Crop window `(top, left, height, width)`.
pub fn crop_window(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &AugmentConfig) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale.0..=cfg.scale.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    // Central crop at the closest admissible aspect ratio.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.ratio.0 {
        ((w as f64 / cfg.ratio.0).round() as usize, w)
    } else if in_ratio > cfg.ratio.1 {
        (h, (h as f64 * cfg.ratio.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bicubic resample of the window back to the full `H×W`, channel by channel.
pub fn resized_crop(image: &Tensor, window: (usize, usize, usize, usize)) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(HiveError::Data(format!("expected an HxWxC image, got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (top, left, ch, cw) = window;
    let mut out = vec![0.0; h * w * c];
    for k in 0..c {
        let plane: Vec<f32> = (0..h * w).map(|i| image.data()[i * c + k] as f32).collect();
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, plane).expect("plane size");
        let crop = imageops::crop_imm(&buf, left as u32, top as u32, cw as u32, ch as u32);
        let resized = imageops::resize(&*crop, w as u32, h as u32, FilterType::CatmullRom);
        for (i, p) in resized.pixels().enumerate() {
            out[i * c + k] = (p.0[0] as f64).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn hflip(image: &Tensor) -> Tensor {
    let shape = image.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let off = (y * w + x) * c;
            out.extend_from_slice(&src[off..off + c]);
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

/// Deterministic augmentation of sample `index` in `epoch`.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, seed: u64, epoch: u64, index: u64) -> Result<Tensor> {
    if !cfg.enabled {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let window = crop_window(&mut rng, h, w, cfg);
    let mut out = if window == (0, 0, h, w) {
        image.clone()
    } else {
        resized_crop(image, window)?
    };
    if rng.random_bool(cfg.hflip_p) {
        out = hflip(&out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        let data = (0..16 * 16 * 3).map(|i| (i % 97) as f64 / 97.0).collect();
        Tensor::new(vec![16, 16, 3], data).unwrap()
    }

    #[test]
    fn deterministic_per_epoch() {
        let cfg = AugmentConfig::default();
        let img = ramp();
        let a = augment(&img, &cfg, 7, 0, 3).unwrap();
        let b = augment(&img, &cfg, 7, 0, 3).unwrap();
        assert_eq!(a, b);
        let differs = (1..6).any(|e| augment(&img, &cfg, 7, e, 3).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn windows_respect_bounds() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (t, l, h, w) = crop_window(&mut rng, 16, 16, &cfg);
            assert!(t + h <= 16 && l + w <= 16 && h > 0 && w > 0);
        }
    }

    #[test]
    fn flip_twice_is_identity_and_disabled_is_noop() {
        let img = ramp();
        assert_eq!(hflip(&hflip(&img)), img);
        let off = AugmentConfig {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(augment(&img, &off, 1, 2, 3).unwrap(), img);
    }

    #[test]
    fn full_window_resize_is_close_to_identity() {
        let img = ramp();
        let out = resized_crop(&img, (0, 0, 16, 16)).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
    }
}
