//! One TOML document describing a complete run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{DisplacementMetric, PgdConfig};
use crate::clustering::KMeansParams;
use crate::density::KdeOptions;
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use crate::refnet::{ProbeLayer, RefNetConfig, RefNetTrainConfig, ShapeDatasetConfig};
use crate::som::{Topology, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training images for the reference network.
    pub train: ShapeDatasetConfig,
    /// Seed of the held-out images whose activations feed every analysis.
    pub analysis_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: ShapeDatasetConfig::default(),
            analysis_seed: 1,
        }
    }
}

impl DataSection {
    pub fn analysis(&self) -> ShapeDatasetConfig {
        ShapeDatasetConfig {
            seed: self.analysis_seed,
            ..self.train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub arch: RefNetConfig,
    pub init_seed: u64,
    pub train: RefNetTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SomSection {
    pub rows: usize,
    pub cols: usize,
    pub topology: Topology,
    /// Seed of the initial weights.
    pub init_seed: u64,
    pub train: TrainConfig,
    /// Extra grid sizes trained only to report dead-unit fractions.
    pub dead_unit_grids: Vec<[usize; 2]>,
}

impl Default for SomSection {
    fn default() -> Self {
        SomSection {
            rows: 20,
            cols: 20,
            topology: Topology::Toroidal,
            init_seed: 0,
            train: TrainConfig::default(),
            dead_unit_grids: vec![[10, 10], [30, 30]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySection {
    pub kde: KdeOptions,
    pub top_k: usize,
    /// Attractors must reach this percentile of the density values.
    pub min_percentile: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            kde: KdeOptions::default(),
            top_k: 5,
            min_percentile: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            k: 8,
            n_seeds: 5,
            base_seed: 0,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

impl ClusterSection {
    pub fn params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            n_seeds: self.n_seeds,
            base_seed: self.base_seed,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// `eps` and `seed` of the template are replaced per image and budget.
    pub pgd: PgdConfig,
    pub eps_list: Vec<f64>,
    /// Number of analysis images attacked.
    pub n_pairs: usize,
    pub metric: DisplacementMetric,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            pgd: PgdConfig::default(),
            eps_list: vec![0.01, 0.02, 0.04, 0.08],
            n_pairs: 100,
            metric: DisplacementMetric::Grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub layers: Vec<ProbeLayer>,
    pub data: DataSection,
    pub net: NetSection,
    pub som: SomSection,
    pub density: DensitySection,
    pub cluster: ClusterSection,
    pub attack: AttackSection,
    pub inversion: InversionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("run"),
            layers: ProbeLayer::ALL.to_vec(),
            data: DataSection::default(),
            net: NetSection::default(),
            som: SomSection::default(),
            density: DensitySection::default(),
            cluster: ClusterSection::default(),
            attack: AttackSection::default(),
            inversion: InversionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("config not serializable: {e}")))
    }

    /// Sets every seed in the document from one value. The analysis images
    /// get `seed + 1` so they never coincide with the training images.
    pub fn apply_seed(&mut self, seed: u64) {
        self.data.train.seed = seed;
        self.data.analysis_seed = seed.wrapping_add(1);
        self.net.init_seed = seed;
        self.net.train.seed = seed;
        self.som.init_seed = seed;
        self.som.train.seed = seed;
        self.cluster.base_seed = seed;
        self.attack.pgd.seed = seed;
        self.inversion.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("at least one layer is required"));
        }
        self.net.arch.validate()?;
        self.som.train.validate()?;
        self.inversion.validate()?;
        let grids = std::iter::once([self.som.rows, self.som.cols])
            .chain(self.som.dead_unit_grids.iter().copied());
        for [m, n] in grids {
            if m == 0 || n == 0 {
                return Err(Error::invalid(format!("grid {m}x{n} must be non-empty")));
            }
        }
        if self.density.top_k == 0 {
            return Err(Error::invalid("density.top_k must be >= 1"));
        }
        if !(0.0..=100.0).contains(&self.density.min_percentile) {
            return Err(Error::invalid(
                "density.min_percentile must lie in [0, 100]",
            ));
        }
        if self.cluster.k == 0 || self.cluster.n_seeds == 0 {
            return Err(Error::invalid("cluster.k and cluster.n_seeds must be >= 1"));
        }
        if self
            .attack
            .eps_list
            .iter()
            .any(|e| !(*e >= 0.0 && e.is_finite()))
        {
            return Err(Error::invalid(
                "attack.eps_list entries must be finite and >= 0",
            ));
        }
        if self.attack.n_pairs < 2 {
            return Err(Error::invalid("attack.n_pairs must be >= 2"));
        }
        let data = &self.data.train;
        if (data.height, data.width, data.n_classes)
            != (
                self.net.arch.height,
                self.net.arch.width,
                self.net.arch.n_classes,
            )
        {
            return Err(Error::invalid(
                "dataset image size and class count must match the network architecture",
            ));
        }
        Ok(())
    }
}
