use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::refnet::{LossSpec, RefNet};

/// L∞ projected-gradient-descent attack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    /// Maximum per-pixel perturbation.
    pub eps: f64,
    pub n_iter: usize,
    /// Per-iteration signed-gradient step.
    pub step: f64,
    pub rand_init: bool,
    pub targeted: bool,
    pub target_class: Option<usize>,
    pub clip_min: f64,
    pub clip_max: f64,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            eps: 0.04,
            n_iter: 40,
            step: 0.002,
            rand_init: true,
            targeted: true,
            target_class: None,
            clip_min: 0.0,
            clip_max: 1.0,
            seed: 0,
        }
    }
}

impl PgdConfig {
    /// An `eps` of zero is accepted and yields the unperturbed image.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!(
                "eps must be >= 0, got {}",
                self.eps
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!(
                "step must be > 0, got {}",
                self.step
            )));
        }
        if self.clip_min.partial_cmp(&self.clip_max) != Some(std::cmp::Ordering::Less) {
            return Err(Error::invalid(format!(
                "clip_min ({}) must be below clip_max ({})",
                self.clip_min, self.clip_max
            )));
        }
        if self.targeted && self.target_class.is_none() {
            return Err(Error::invalid("targeted attack requires target_class"));
        }
        Ok(())
    }

    /// Target policy for targeted attacks: the class after the true one.
    pub fn with_default_target(mut self, true_class: usize, n_classes: usize) -> Self {
        if self.targeted {
            self.target_class = Some((true_class + 1) % n_classes);
        }
        self
    }
}

/// Crafts an adversarial version of `x` (whose true class is `label`).
///
/// Each iteration moves every pixel by `step` along the sign of the input
/// gradient, toward the target class for targeted attacks and away from the
/// true class otherwise, then projects back into the `eps` ball around `x`
/// and into the pixel bounds.
pub fn pgd_attack(net: &RefNet, x: &Image, label: usize, cfg: &PgdConfig) -> Result<Image> {
    cfg.validate()?;
    if x.pixels
        .iter()
        .any(|&p| !(p >= cfg.clip_min && p <= cfg.clip_max))
    {
        return Err(Error::invalid("input pixels lie outside the clip bounds"));
    }
    let (loss, direction) = if cfg.targeted {
        let target = cfg.target_class.expect("validated");
        (LossSpec::CrossEntropy { target }, -1.0)
    } else {
        (LossSpec::CrossEntropy { target: label }, 1.0)
    };
    let project = |v: f64, orig: f64| {
        v.clamp(orig - cfg.eps, orig + cfg.eps)
            .clamp(cfg.clip_min, cfg.clip_max)
    };

    let mut adv = x.clone();
    if cfg.rand_init && cfg.eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (a, &o) in adv.pixels.iter_mut().zip(&x.pixels) {
            *a = project(o + rng.gen_range(-cfg.eps..=cfg.eps), o);
        }
    }
    for _ in 0..cfg.n_iter {
        let (_, grad) = net.backward_input(&adv, &loss)?;
        for ((a, &g), &o) in adv.pixels.iter_mut().zip(&grad.pixels).zip(&x.pixels) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = project(*a + direction * cfg.step * s, o);
        }
    }
    Ok(adv)
}
