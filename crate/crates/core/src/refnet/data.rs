use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Procedural pattern families, one per class.
pub const CLASS_NAMES: [&str; 8] = [
    "horizontal-bars",
    "vertical-bars",
    "diagonal-bars",
    "antidiagonal-bars",
    "cross",
    "blob",
    "checkers",
    "ring",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeDatasetConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapeDatasetConfig {
    fn default() -> Self {
        ShapeDatasetConfig {
            n_classes: 8,
            per_class: 300,
            height: 16,
            width: 16,
            noise: 0.08,
            seed: 0,
        }
    }
}

/// Labeled grayscale images of procedural patterns, generated on demand.
#[derive(Debug, Clone)]
pub struct ShapeDataset {
    pub images: Vec<Image>,
    pub labels: Vec<u32>,
    pub n_classes: usize,
}

impl ShapeDataset {
    /// Samples are interleaved by class (`label = i % n_classes`).
    pub fn generate(cfg: &ShapeDatasetConfig) -> Result<Self> {
        if cfg.n_classes == 0 || cfg.n_classes > CLASS_NAMES.len() {
            return Err(Error::invalid(format!(
                "n_classes must be in 1..={}, got {}",
                CLASS_NAMES.len(),
                cfg.n_classes
            )));
        }
        if cfg.height < 4 || cfg.width < 4 {
            return Err(Error::invalid("images must be at least 4x4"));
        }
        if !cfg.noise.is_finite() || cfg.noise < 0.0 {
            return Err(Error::invalid("noise must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.n_classes * cfg.per_class;
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % cfg.n_classes;
            images.push(render(class, cfg, &mut rng));
            labels.push(class as u32);
        }
        Ok(ShapeDataset {
            images,
            labels,
            n_classes: cfg.n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn render(class: usize, cfg: &ShapeDatasetConfig, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    let contrast = rng.gen_range(0.6..1.0);
    let background = rng.gen_range(0.0..0.2);
    let period = rng.gen_range(3.0..5.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let cy = rng.gen_range(0.3..0.7) * h as f64;
    let cx = rng.gen_range(0.3..0.7) * w as f64;
    let radius = rng.gen_range(0.15..0.3) * h.min(w) as f64;
    let stripes = |t: f64| {
        if ((2.0 * PI * t / period) + phase).sin() > 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let mut pixels = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64, j as f64);
            let v = match class {
                0 => stripes(y),
                1 => stripes(x),
                2 => stripes((x + y) / std::f64::consts::SQRT_2),
                3 => stripes((x - y) / std::f64::consts::SQRT_2),
                4 => {
                    let arm = 1.2;
                    ((y - cy).abs() < arm || (x - cx).abs() < arm) as u8 as f64
                }
                5 => {
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-d2 / (2.0 * radius * radius)).exp()
                }
                6 => {
                    let cell = (period / 1.5).round().max(2.0) as usize;
                    (((i / cell) + (j / cell)) % 2) as f64
                }
                _ => {
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    ((d - radius * 1.4).abs() < 1.0) as u8 as f64
                }
            };
            let px = background + contrast * v + noise.sample(rng) * (cfg.noise > 0.0) as u8 as f64;
            pixels.push(px.clamp(0.0, 1.0));
        }
    }
    Image {
        height: h,
        width: w,
        pixels,
    }
}
