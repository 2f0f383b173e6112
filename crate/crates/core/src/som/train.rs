use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{BmuAssignment, SomGrid};
use crate::error::{Error, Result};
use crate::hlr::HlrDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    #[default]
    Exp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial neighborhood radius in grid units.
    pub sigma0: f64,
    /// Initial learning rate.
    pub alpha0: f64,
    pub decay: Decay,
    pub epochs: u32,
    pub epsilon_stab: f64,
    pub seed: u64,
    /// Decay time constant in updates. `None` means the planned number of
    /// updates (`epochs × n_samples`, or `max_updates` when smaller).
    pub tau: Option<f64>,
    /// Separate time constant for the neighborhood radius; defaults to `tau`.
    pub sigma_tau: Option<f64>,
    /// Hard cap on the number of updates.
    pub max_updates: Option<u64>,
    /// Moving-average window used when reporting the loss trace.
    pub loss_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma0: 5.0,
            alpha0: 0.01,
            decay: Decay::Exp,
            epochs: 5,
            epsilon_stab: 1e-8,
            seed: 0,
            tau: None,
            sigma_tau: None,
            max_updates: None,
            loss_window: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.sigma0) {
            return Err(Error::invalid(format!(
                "sigma0 must be > 0, got {}",
                self.sigma0
            )));
        }
        if !positive(self.alpha0) {
            return Err(Error::invalid(format!(
                "alpha0 must be > 0, got {}",
                self.alpha0
            )));
        }
        if !positive(self.epsilon_stab) {
            return Err(Error::invalid("epsilon_stab must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        for (name, t) in [("tau", self.tau), ("sigma_tau", self.sigma_tau)] {
            if let Some(t) = t {
                if t.is_nan() || t < 1.0 {
                    return Err(Error::invalid(format!("{name} must be >= 1, got {t}")));
                }
            }
        }
        if self.max_updates == Some(0) {
            return Err(Error::invalid("max_updates must be >= 1"));
        }
        if self.loss_window == 0 {
            return Err(Error::invalid("loss_window must be >= 1"));
        }
        Ok(())
    }

    /// Number of updates a run over `n_samples` samples will perform.
    pub fn planned_updates(&self, n_samples: usize) -> u64 {
        let full = self.epochs as u64 * n_samples as u64;
        self.max_updates.map_or(full, |cap| full.min(cap))
    }

    /// Resolves the annealing schedule for a dataset of `n_samples`.
    pub fn schedule(&self, n_samples: usize) -> Result<Schedule> {
        self.validate()?;
        let tau = self
            .tau
            .unwrap_or_else(|| self.planned_updates(n_samples).max(1) as f64);
        Ok(Schedule {
            alpha0: self.alpha0,
            sigma0: self.sigma0,
            tau_alpha: tau,
            tau_sigma: self.sigma_tau.unwrap_or(tau),
            epsilon_stab: self.epsilon_stab,
        })
    }
}

/// Learning-rate and neighborhood annealing for exponential decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alpha0: f64,
    pub sigma0: f64,
    pub tau_alpha: f64,
    pub tau_sigma: f64,
    pub epsilon_stab: f64,
}

impl Schedule {
    pub fn alpha(&self, s: u64) -> f64 {
        self.alpha0 * (-(s as f64) / self.tau_alpha).exp()
    }

    pub fn sigma(&self, s: u64) -> f64 {
        self.sigma0 * (-(s as f64) / self.tau_sigma).exp()
    }

    /// Neighborhood weight for a unit at squared lattice distance `d2` from the BMU.
    pub fn theta(&self, d2: f64, s: u64) -> f64 {
        let sigma = self.sigma(s);
        (-d2 / (2.0 * sigma * sigma + self.epsilon_stab)).exp()
    }
}

/// One competitive-learning step: every unit moves toward `x` by
/// `theta · alpha`, where theta falls off with lattice distance from the BMU.
///
/// Returns the BMU found before the update.
pub fn update_step(
    grid: &mut SomGrid,
    x: &[f32],
    s: u64,
    schedule: &Schedule,
) -> Result<BmuAssignment> {
    grid.check_input(x)?;
    let (bmu_idx, d2) = grid.nearest_unit(x);
    let bmu = grid.coords_of(bmu_idx);
    let alpha = schedule.alpha(s);
    let dim = grid.dim();
    let rates: Vec<f32> = (0..grid.n_units())
        .map(|v| {
            let lat = grid.lattice_distance_sq(grid.coords_of(v), bmu);
            (schedule.theta(lat, s) * alpha) as f32
        })
        .collect();
    for (w, &rate) in grid.weights_mut().chunks_exact_mut(dim).zip(&rates) {
        if rate == 0.0 {
            continue;
        }
        for (wi, &xi) in w.iter_mut().zip(x) {
            *wi += rate * (xi - *wi);
        }
    }
    Ok(BmuAssignment {
        sample_index: 0,
        row: bmu.0,
        col: bmu.1,
        quantization_error: d2.sqrt(),
    })
}

/// Per-update quantization errors recorded during training.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub errors: Vec<f64>,
    pub window: usize,
}

/// Online training with batch size 1. Samples are reshuffled every epoch and
/// the quantization error of each sample is recorded before it is applied.
pub fn train(grid: &mut SomGrid, data: &HlrDataset, cfg: &TrainConfig) -> Result<LossTrace> {
    if data.n_samples() == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if data.dim() != grid.dim() {
        return Err(Error::invalid(format!(
            "dataset dim {} does not match grid dim {}",
            data.dim(),
            grid.dim()
        )));
    }
    let schedule = cfg.schedule(data.n_samples())?;
    let total = cfg.planned_updates(data.n_samples());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.n_samples()).collect();
    let mut errors = Vec::with_capacity(total as usize);
    let mut s = 0u64;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            if s >= total {
                break 'epochs;
            }
            let bmu = update_step(grid, data.vector(i), s, &schedule)?;
            errors.push(bmu.quantization_error);
            s += 1;
        }
    }
    Ok(LossTrace {
        errors,
        window: cfg.loss_window,
    })
}

/// Sliding-window mean of the trace, scaled so the first value is exactly 1.
///
/// Returns an empty vector when the window is longer than the trace.
pub fn moving_average(trace: &LossTrace) -> Result<Vec<f64>> {
    let w = trace.window;
    if w == 0 {
        return Err(Error::invalid("moving-average window must be >= 1"));
    }
    let len = trace.errors.len();
    if w > len {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(len - w + 1);
    let mut sum: f64 = trace.errors[..w].iter().sum();
    out.push(sum / w as f64);
    for i in w..len {
        // Recompute periodically so long traces do not accumulate drift.
        if i % 4096 == 0 {
            sum = trace.errors[i + 1 - w..=i].iter().sum();
        } else {
            sum += trace.errors[i] - trace.errors[i - w];
        }
        out.push(sum / w as f64);
    }
    let first = out[0];
    if first.is_nan() || first <= 0.0 {
        return Err(Error::Numeric(
            "first windowed loss is zero; cannot normalize".into(),
        ));
    }
    for v in &mut out {
        *v /= first;
    }
    out[0] = 1.0;
    Ok(out)
}
