//! Model inversion: optimizes input pixels until a probe layer's pooled
//! activation points in the same direction as a target SOM code.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{find_attractors, Attractor, DensityMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::refnet::{LossSpec, ProbeLayer, RefNet};
use crate::som::SomGrid;

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid(
            "cosine distance is undefined for zero vectors",
        ));
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok((1.0 - cos.clamp(-1.0, 1.0)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InversionInit {
    #[default]
    RandomUniform,
    /// Every pixel 0.5.
    Gray,
    /// Start from a given image.
    #[serde(skip)]
    Image(Image),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub lr: f64,
    pub n_iter: usize,
    pub seed: u64,
    /// Weight of the squared-difference total-variation penalty.
    pub smoothness_lambda: f64,
    pub init: InversionInit,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            lr: 0.05,
            n_iter: 512,
            seed: 0,
            smoothness_lambda: 0.0,
            init: InversionInit::RandomUniform,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.n_iter == 0 {
            return Err(Error::invalid("n_iter must be >= 1"));
        }
        if !self.smoothness_lambda.is_finite() || self.smoothness_lambda < 0.0 {
            return Err(Error::invalid("smoothness_lambda must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// Iterate with the lowest cosine distance.
    pub image: Image,
    pub final_loss: f64,
    /// Cosine distance of every iterate, starting with the initial image.
    pub loss_trace: Vec<f64>,
}

impl InversionResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,cosine_distance\n");
        for (i, v) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// Squared-difference total variation and its gradient.
fn total_variation(img: &Image) -> (f64, Vec<f64>) {
    let (h, w) = (img.height, img.width);
    let p = &img.pixels;
    let mut tv = 0.0;
    let mut grad = vec![0.0; p.len()];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if i + 1 < h {
                let d = p[k + w] - p[k];
                tv += d * d;
                grad[k + w] += 2.0 * d;
                grad[k] -= 2.0 * d;
            }
            if j + 1 < w {
                let d = p[k + 1] - p[k];
                tv += d * d;
                grad[k + 1] += 2.0 * d;
                grad[k] -= 2.0 * d;
            }
        }
    }
    (tv, grad)
}

/// Adam on pixel values minimizing the cosine distance between the pooled
/// probe activation at `layer` and `target`, plus an optional smoothness
/// penalty. Pixels are clipped to `[0, 1]` after every step.
pub fn invert_code(
    net: &RefNet,
    layer: ProbeLayer,
    target: &[f64],
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    let dim = net.probe_dim(layer);
    if target.len() != dim {
        return Err(Error::invalid(format!(
            "target has length {}, layer {} pools to {dim}",
            target.len(),
            layer.tag()
        )));
    }
    let (h, w) = (net.config().height, net.config().width);
    let mut x = match &cfg.init {
        InversionInit::RandomUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Image::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect())?
        }
        InversionInit::Gray => Image::filled(h, w, 0.5),
        InversionInit::Image(img) => {
            let mut img = img.clone();
            for p in &mut img.pixels {
                *p = p.clamp(0.0, 1.0);
            }
            img
        }
    };
    let spec = LossSpec::CosineToCode {
        layer,
        code: target.to_vec(),
    };
    let mut m = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    let mut trace = Vec::with_capacity(cfg.n_iter + 1);
    let mut best = (f64::INFINITY, x.clone());
    for t in 1..=cfg.n_iter + 1 {
        let (loss, mut grad) = net.backward_input(&x, &spec)?;
        trace.push(loss);
        if loss < best.0 {
            best = (loss, x.clone());
        }
        if t == cfg.n_iter + 1 {
            break;
        }
        if cfg.smoothness_lambda > 0.0 {
            let (_, tv_grad) = total_variation(&x);
            for (g, tg) in grad.pixels.iter_mut().zip(tv_grad) {
                *g += cfg.smoothness_lambda * tg;
            }
        }
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (((p, g), mi), vi) in x
            .pixels
            .iter_mut()
            .zip(&grad.pixels)
            .zip(&mut m)
            .zip(&mut v)
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let step = cfg.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + 1e-8);
            *p = (*p - step).clamp(0.0, 1.0);
        }
    }
    Ok(InversionResult {
        image: best.1,
        final_loss: best.0.clamp(0.0, 2.0),
        loss_trace: trace,
    })
}

/// Inverts the SOM codes at the densest attractors of `density`, in rank order.
pub fn invert_attractors(
    net: &RefNet,
    som: &SomGrid,
    layer: ProbeLayer,
    density: &DensityMap,
    top_k: usize,
    min_percentile: f64,
    cfg: &InversionConfig,
) -> Result<Vec<(Attractor, InversionResult)>> {
    if som.dim() != net.probe_dim(layer) {
        return Err(Error::invalid(format!(
            "SOM dim {} does not match layer {} ({})",
            som.dim(),
            layer.tag(),
            net.probe_dim(layer)
        )));
    }
    if (density.m, density.n) != (som.m(), som.n()) {
        return Err(Error::invalid(
            "density map shape differs from the SOM grid",
        ));
    }
    let attractors = find_attractors(density, top_k, min_percentile)?;
    if attractors.is_empty() {
        warn!("no attractors above the {min_percentile} percentile; nothing to invert");
        return Ok(Vec::new());
    }
    attractors
        .par_iter()
        .map(|a| {
            let code: Vec<f64> = som
                .weight(a.row, a.col)?
                .iter()
                .map(|&v| v as f64)
                .collect();
            Ok((*a, invert_code(net, layer, &code, cfg)?))
        })
        .collect()
}
