use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Periodic boundaries on both axes.
    #[default]
    Toroidal,
    Planar,
}

impl Topology {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Topology::Toroidal => 0,
            Topology::Planar => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Topology::Toroidal),
            1 => Some(Topology::Planar),
            _ => None,
        }
    }
}

/// An `m × n` lattice of code vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SomGrid {
    m: usize,
    n: usize,
    dim: usize,
    topology: Topology,
    weights: Vec<f32>,
}

/// Best-matching unit of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BmuAssignment {
    pub sample_index: usize,
    pub row: usize,
    pub col: usize,
    /// Euclidean distance between the sample and the BMU's weight vector.
    pub quantization_error: f64,
}

impl BmuAssignment {
    pub fn coords(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

fn check_shape(m: usize, n: usize, dim: usize) -> Result<()> {
    if m == 0 || n == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "grid dimensions must be positive, got m={m}, n={n}, dim={dim}"
        )));
    }
    Ok(())
}

/// Random grid whose code vectors are drawn uniformly from `[0, 1)^dim` and
/// then scaled to unit length.
pub fn init_grid(m: usize, n: usize, dim: usize, seed: u64, topology: Topology) -> Result<SomGrid> {
    check_shape(m, n, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(m * n * dim);
    for _ in 0..m * n {
        let mut w: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>()).collect();
        let norm = w
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for v in &mut w {
                *v = (*v as f64 / norm) as f32;
            }
        } else {
            w[0] = 1.0;
        }
        weights.extend_from_slice(&w);
    }
    Ok(SomGrid {
        m,
        n,
        dim,
        topology,
        weights,
    })
}

impl SomGrid {
    /// Builds a grid from explicit row-major weights.
    pub fn from_weights(
        m: usize,
        n: usize,
        dim: usize,
        topology: Topology,
        weights: Vec<f32>,
    ) -> Result<Self> {
        check_shape(m, n, dim)?;
        if weights.len() != m * n * dim {
            return Err(Error::invalid(format!(
                "expected {} weights for a {m}x{n}x{dim} grid, got {}",
                m * n * dim,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("grid weights must be finite"));
        }
        Ok(SomGrid {
            m,
            n,
            dim,
            topology,
            weights,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_units(&self) -> usize {
        self.m * self.n
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    /// Code vector of the unit at row-major index `idx`.
    pub fn unit(&self, idx: usize) -> &[f32] {
        &self.weights[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn weight(&self, row: usize, col: usize) -> Result<&[f32]> {
        self.check_coord((row, col))?;
        Ok(self.unit(row * self.n + col))
    }

    pub fn coords_of(&self, idx: usize) -> (usize, usize) {
        (idx / self.n, idx % self.n)
    }

    fn check_coord(&self, (r, c): (usize, usize)) -> Result<()> {
        if r >= self.m || c >= self.n {
            return Err(Error::invalid(format!(
                "coordinate ({r}, {c}) outside {}x{} grid",
                self.m, self.n
            )));
        }
        Ok(())
    }

    /// Squared lattice distance between two in-range coordinates.
    pub(crate) fn lattice_distance_sq(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let dr = axis_delta(a.0, b.0, self.m, self.topology);
        let dc = axis_delta(a.1, b.1, self.n, self.topology);
        (dr * dr + dc * dc) as f64
    }

    /// Lattice distance between two units, wrapping around both axes on a torus.
    pub fn grid_distance(&self, a: (usize, usize), b: (usize, usize)) -> Result<f64> {
        self.check_coord(a)?;
        self.check_coord(b)?;
        Ok(self.lattice_distance_sq(a, b).sqrt())
    }

    /// Largest distance any two units can have on this grid.
    pub fn diameter(&self) -> f64 {
        let span = |extent: usize| match self.topology {
            Topology::Toroidal => extent / 2,
            Topology::Planar => extent - 1,
        };
        let (r, c) = (span(self.m) as f64, span(self.n) as f64);
        (r * r + c * c).sqrt()
    }

    /// Row-major index and squared distance of the closest unit. Ties go to the
    /// smaller index.
    pub(crate) fn nearest_unit(&self, x: &[f32]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (idx, w) in self.weights.chunks_exact(self.dim).enumerate() {
            let d: f64 = w
                .iter()
                .zip(x)
                .map(|(&a, &b)| {
                    let t = (b - a) as f64;
                    t * t
                })
                .sum();
            if d < best.1 {
                best = (idx, d);
            }
        }
        best
    }

    pub(crate) fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "input has length {}, grid expects {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input contains non-finite values"));
        }
        Ok(())
    }

    /// Best-matching unit for a single vector.
    pub fn find_bmu(&self, x: &[f32]) -> Result<BmuAssignment> {
        self.check_input(x)?;
        let (idx, d2) = self.nearest_unit(x);
        let (row, col) = self.coords_of(idx);
        Ok(BmuAssignment {
            sample_index: 0,
            row,
            col,
            quantization_error: d2.sqrt(),
        })
    }

    /// BMUs for a batch of vectors laid out row-major with stride `dim`.
    pub fn assign_all(&self, vectors: &[f32]) -> Result<Vec<BmuAssignment>> {
        if !vectors.len().is_multiple_of(self.dim) {
            return Err(Error::invalid(format!(
                "batch length {} is not a multiple of grid dim {}",
                vectors.len(),
                self.dim
            )));
        }
        vectors
            .par_chunks_exact(self.dim)
            .enumerate()
            .map(|(i, x)| {
                let mut a = self.find_bmu(x)?;
                a.sample_index = i;
                Ok(a)
            })
            .collect()
    }
}

fn axis_delta(a: usize, b: usize, extent: usize, topology: Topology) -> usize {
    let d = a.abs_diff(b);
    match topology {
        Topology::Toroidal => d.min(extent - d),
        Topology::Planar => d,
    }
}
