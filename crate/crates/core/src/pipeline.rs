//! Command implementations. Every command reads its inputs from and writes
//! its artifacts to the run directory named in the config, then records a
//! JSON manifest with the full config, the seeds it used and the SHA-256 of
//! every file it read or wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{curves_csv, displacement_experiment, raw_distances_csv, ttest_csv};
use crate::clustering::clustering_score_experiment;
use crate::config::PipelineConfig;
use crate::density::{
    class_density, dead_unit_fraction, find_attractors, kde_density, Bandwidth, DensityMap,
    KdeOptions,
};
use crate::error::{Error, Result};
use crate::hlr::{decode_hlr, encode_hlr, HlrDataset};
use crate::image::encode_pgm_unit;
use crate::inversion::invert_attractors;
use crate::refnet::{
    accuracy, decode_refnet, encode_refnet, train_refnet, ProbeLayer, RefNet, ShapeDataset,
};
use crate::som::{
    decode_som, encode_som, init_grid, moving_average, train, BmuAssignment, SomGrid,
};

pub const NET_FILE: &str = "refnet.rnet";

/// Bandwidth used for a class whose BMUs collapse onto a single row or column.
pub const CLASS_FALLBACK_BANDWIDTH: f64 = 1.0;

pub fn hlr_file(layer: ProbeLayer) -> String {
    format!("hlr_{}.hlr", layer.tag())
}

pub fn som_file(layer: ProbeLayer) -> String {
    format!("som_{}.som", layer.tag())
}

pub fn manifest_file(command: &str) -> String {
    format!("manifest-{command}.json")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn output(&self, path: &str) -> Option<&FileRecord> {
        self.outputs.iter().find(|r| r.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Tracks the files one command touches.
struct Recorder {
    dir: PathBuf,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    seeds: BTreeMap<String, u64>,
}

impl Recorder {
    fn new(cfg: &PipelineConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        Ok(Recorder {
            dir: cfg.out_dir.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    fn read(&mut self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        if !self.inputs.iter().any(|r| r.path == name) {
            self.inputs.push(FileRecord {
                path: name.to_owned(),
                sha256: sha256_hex(&bytes),
            });
        }
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs.push(FileRecord {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_owned(), value);
    }

    fn finish(self, command: &str, cfg: &PipelineConfig) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_owned(),
            config: cfg.clone(),
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::invalid(format!("manifest not serializable: {e}")))?;
        fs::write(self.dir.join(manifest_file(command)), json + "\n")?;
        info!(
            "{command}: wrote {} files to {}",
            manifest.outputs.len(),
            self.dir.display()
        );
        Ok(manifest)
    }

    fn net(&mut self) -> Result<RefNet> {
        decode_refnet(&self.read(NET_FILE)?)
    }

    fn hlr(&mut self, layer: ProbeLayer) -> Result<HlrDataset> {
        decode_hlr(&self.read(&hlr_file(layer))?)
    }

    fn som(&mut self, layer: ProbeLayer) -> Result<SomGrid> {
        decode_som(&self.read(&som_file(layer))?)
    }
}

/// Held-out images whose activations feed every analysis command.
pub fn analysis_dataset(cfg: &PipelineConfig) -> Result<ShapeDataset> {
    ShapeDataset::generate(&cfg.data.analysis())
}

fn labels_of(hlr: &HlrDataset) -> Result<&[u32]> {
    hlr.labels()
        .ok_or_else(|| Error::invalid(format!("HLR set `{}` carries no labels", hlr.layer_tag())))
}

fn check_som_matches(som: &SomGrid, hlr: &HlrDataset, layer: ProbeLayer) -> Result<()> {
    if som.dim() != hlr.dim() {
        return Err(Error::invalid(format!(
            "SOM for {} has dim {}, HLR set has dim {}",
            layer.tag(),
            som.dim(),
            hlr.dim()
        )));
    }
    Ok(())
}

fn density_pair(rec: &mut Recorder, stem: &str, map: &DensityMap) -> Result<()> {
    rec.write(&format!("{stem}.csv"), map.to_csv().as_bytes())?;
    rec.write(&format!("{stem}.pgm"), &map.to_pgm())
}

/// Trains the reference network and writes its checkpoint and accuracy.
pub fn cmd_refnet_train(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg)?;
    rec.seed("data.train.seed", cfg.data.train.seed);
    rec.seed("data.analysis_seed", cfg.data.analysis_seed);
    rec.seed("net.init_seed", cfg.net.init_seed);
    rec.seed("net.train.seed", cfg.net.train.seed);
    let train_set = ShapeDataset::generate(&cfg.data.train)?;
    let mut net = RefNet::new(cfg.net.arch, cfg.net.init_seed)?;
    let report = train_refnet(&mut net, &train_set, &cfg.net.train)?;
    let held_out = accuracy(&net, &analysis_dataset(cfg)?)?;
    info!(
        "refnet: train accuracy {:.4} -> {:.4}, held-out {:.4}",
        report.initial_accuracy, report.final_accuracy, held_out
    );
    if report.final_accuracy < 0.9 {
        warn!("train accuracy {:.4} is below 0.9", report.final_accuracy);
    }
    rec.write(NET_FILE, &encode_refnet(&net))?;
    let csv = format!(
        "metric,value\ninitial_train_accuracy,{}\ntrain_accuracy,{}\nheld_out_accuracy,{}\nfinal_loss,{}\n",
        report.initial_accuracy, report.final_accuracy, held_out, report.final_loss
    );
    rec.write("refnet_accuracy.csv", csv.as_bytes())?;
    rec.finish("refnet-train", cfg)
}

/// Writes one labeled HLR file per configured layer.
pub fn cmd_extract(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg)?;
    rec.seed("data.analysis_seed", cfg.data.analysis_seed);
    let net = rec.net()?;
    let data = analysis_dataset(cfg)?;
    let outputs = data
        .images
        .par_iter()
        .map(|x| net.forward(x))
        .collect::<Result<Vec<_>>>()?;
    for &layer in &cfg.layers {
        let tensors: Vec<_> = outputs
            .iter()
            .zip(&data.labels)
            .map(|(o, &y)| o.probe(layer).clone().with_label(y))
            .collect();
        let hlr = HlrDataset::from_tensors(&tensors, layer.tag())?;
        rec.write(&hlr_file(layer), &encode_hlr(&hlr)?)?;
    }
    rec.finish("extract", cfg)
}

/// Trains one SOM per layer and writes its checkpoint and loss curve.
pub fn cmd_train_som(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg)?;
    rec.seed("som.init_seed", cfg.som.init_seed);
    rec.seed("som.train.seed", cfg.som.train.seed);
    for &layer in &cfg.layers {
        let hlr = rec.hlr(layer)?;
        let mut grid = init_grid(
            cfg.som.rows,
            cfg.som.cols,
            hlr.dim(),
            cfg.som.init_seed,
            cfg.som.topology,
        )?;
        let trace = train(&mut grid, &hlr, &cfg.som.train)?;
        let ma = moving_average(&trace)?;
        if ma.is_empty() {
            warn!(
                "{}: {} updates is fewer than the {}-update window; loss curve is empty",
                layer.tag(),
                trace.errors.len(),
                trace.window
            );
        } else {
            info!(
                "{}: final normalized moving average {:.4}",
                layer.tag(),
                ma[ma.len() - 1]
            );
        }
        let mut csv = String::from("update,normalized_moving_average\n");
        for (i, v) in ma.iter().enumerate() {
            csv.push_str(&format!("{},{v}\n", i + trace.window));
        }
        rec.write(&som_file(layer), &encode_som(&grid))?;
        rec.write(&format!("som_{}_loss.csv", layer.tag()), csv.as_bytes())?;
    }
    rec.finish("train-som", cfg)
}

fn assign(som: &SomGrid, hlr: &HlrDataset) -> Result<Vec<BmuAssignment>> {
    som.assign_all(hlr.vectors())
}

/// BMU density map, attractors and dead-unit fractions per layer.
pub fn cmd_density(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg)?;
    rec.seed("som.init_seed", cfg.som.init_seed);
    rec.seed("som.train.seed", cfg.som.train.seed);
    for &layer in &cfg.layers {
        let tag = layer.tag();
        let hlr = rec.hlr(layer)?;
        let som = rec.som(layer)?;
        check_som_matches(&som, &hlr, layer)?;
        let assignments = assign(&som, &hlr)?;
        let shape = (som.m(), som.n());
        let map = kde_density(&assignments, shape, &cfg.density.kde)?;
        density_pair(&mut rec, &format!("density_{tag}"), &map)?;

        let attractors = find_attractors(&map, cfg.density.top_k, cfg.density.min_percentile)?;
        let mut csv = String::from("rank,row,col,density\n");
        for a in &attractors {
            csv.push_str(&format!("{},{},{},{}\n", a.rank, a.row, a.col, a.density));
        }
        rec.write(&format!("attractors_{tag}.csv"), csv.as_bytes())?;

        let mut csv = String::from("rows,cols,dead_fraction\n");
        csv.push_str(&format!(
            "{},{},{}\n",
            shape.0,
            shape.1,
            dead_unit_fraction(&assignments, shape)
        ));
        for &[m, n] in &cfg.som.dead_unit_grids {
            let mut grid = init_grid(m, n, hlr.dim(), cfg.som.init_seed, cfg.som.topology)?;
            train(&mut grid, &hlr, &cfg.som.train)?;
            let frac = dead_unit_fraction(&assign(&grid, &hlr)?, (m, n));
            csv.push_str(&format!("{m},{n},{frac}\n"));
        }
        rec.write(&format!("dead_units_{tag}.csv"), csv.as_bytes())?;
    }
    rec.finish("density", cfg)
}

/// One density map per class label per layer.
///
/// A class whose BMUs all share a row or a column has no usable
/// data-driven bandwidth; it is estimated with [`CLASS_FALLBACK_BANDWIDTH`]
/// instead and flagged in the summary.
pub fn cmd_class_density(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg)?;
    for &layer in &cfg.layers {
        let tag = layer.tag();
        let hlr = rec.hlr(layer)?;
        let som = rec.som(layer)?;
        check_som_matches(&som, &hlr, layer)?;
        let labels = labels_of(&hlr)?;
        let assignments = assign(&som, &hlr)?;
        let shape = (som.m(), som.n());
        let classes: BTreeSet<u32> = labels.iter().copied().collect();
        let mut summary =
            String::from("class,n,bandwidth_row,bandwidth_col,fallback,peak_row,peak_col\n");
        for class in classes {
            let (map, fallback) = match class_density(
                &assignments,
                labels,
                class,
                shape,
                &cfg.density.kde,
            ) {
                Ok(map) => (map, false),
                Err(Error::Numeric(msg)) => {
                    warn!("{tag} class {class}: {msg}; using bandwidth {CLASS_FALLBACK_BANDWIDTH}");
                    let opts = KdeOptions {
                        bandwidth: Bandwidth::Fixed(CLASS_FALLBACK_BANDWIDTH),
                        ..cfg.density.kde
                    };
                    (
                        class_density(&assignments, labels, class, shape, &opts)?,
                        true,
                    )
                }
                Err(e) => return Err(e),
            };
            density_pair(&mut rec, &format!("class_density_{tag}_c{class}"), &map)?;
            let n = labels.iter().filter(|&&l| l == class).count();
            let (pr, pc) = map.argmax();
            summary.push_str(&format!(
                "{class},{n},{},{},{fallback},{pr},{pc}\n",
                map.bandwidth.0, map.bandwidth.1
            ));
        }
        rec.write(&format!("class_density_{tag}.csv"), summary.as_bytes())?;
    }
    rec.finish("class-density", cfg)
}

/// k-means on BMU coordinates scored by V-measure, repeated over seeds.
pub fn cmd_cluster_score(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg)?;
    rec.seed("cluster.base_seed", cfg.cluster.base_seed);
    for &layer in &cfg.layers {
        let hlr = rec.hlr(layer)?;
        let som = rec.som(layer)?;
        check_som_matches(&som, &hlr, layer)?;
        let assignments = assign(&som, &hlr)?;
        let report = clustering_score_experiment(
            &assignments,
            labels_of(&hlr)?,
            som.n_units(),
            &cfg.cluster.params(),
        )?;
        info!(
            "{}: V-score {:.4} ± {:.4}",
            layer.tag(),
            report.mean,
            report.std
        );
        rec.write(
            &format!("cluster_scores_{}.csv", layer.tag()),
            report.to_csv(layer.tag()).as_bytes(),
        )?;
    }
    rec.finish("cluster-score", cfg)
}

/// Adversarial BMU displacement for every layer and budget.
pub fn cmd_attack(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    if cfg.attack.eps_list.is_empty() {
        return Err(Error::invalid("attack.eps_list is empty"));
    }
    let mut rec = Recorder::new(cfg)?;
    rec.seed("data.analysis_seed", cfg.data.analysis_seed);
    rec.seed("attack.pgd.seed", cfg.attack.pgd.seed);
    let net = rec.net()?;
    let soms = cfg
        .layers
        .iter()
        .map(|&l| Ok((l, rec.som(l)?)))
        .collect::<Result<Vec<_>>>()?;
    let data = analysis_dataset(cfg)?;
    if data.len() < cfg.attack.n_pairs {
        return Err(Error::invalid(format!(
            "attack.n_pairs = {} exceeds the {} analysis images",
            cfg.attack.n_pairs,
            data.len()
        )));
    }
    let n = cfg.attack.n_pairs;
    let som_refs: Vec<(ProbeLayer, &SomGrid)> = soms.iter().map(|(l, s)| (*l, s)).collect();
    let report = displacement_experiment(
        &net,
        &som_refs,
        &data.images[..n],
        &data.labels[..n],
        &cfg.attack.eps_list,
        &cfg.attack.pgd,
        cfg.attack.metric,
    )?;
    rec.write(
        "displacement_curves.csv",
        curves_csv(&report.curves).as_bytes(),
    )?;
    rec.write(
        "displacement_raw.csv",
        raw_distances_csv(&report.curves).as_bytes(),
    )?;

    let base = cfg.attack.eps_list[0];
    let mut rows = Vec::new();
    for curve in &report.curves {
        for &eps in &cfg.attack.eps_list[1..] {
            match curve.compare(base, eps) {
                Ok(r) => rows.push((curve.layer_tag.clone(), base, eps, r)),
                Err(Error::Numeric(msg)) => warn!("{} eps {base} vs {eps}: {msg}", curve.layer_tag),
                Err(e) => return Err(e),
            }
        }
    }
    rec.write("displacement_ttest.csv", ttest_csv(&rows).as_bytes())?;

    let mut csv = String::from("eps,misclassification\n");
    for (e, m) in cfg.attack.eps_list.iter().zip(&report.misclassification) {
        csv.push_str(&format!("{e},{m}\n"));
    }
    rec.write("misclassification.csv", csv.as_bytes())?;
    rec.finish("attack", cfg)
}

/// Inverts the top density attractors of every layer.
pub fn cmd_invert(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg)?;
    rec.seed("inversion.seed", cfg.inversion.seed);
    let net = rec.net()?;
    for &layer in &cfg.layers {
        let tag = layer.tag();
        let hlr = rec.hlr(layer)?;
        let som = rec.som(layer)?;
        check_som_matches(&som, &hlr, layer)?;
        let map = kde_density(&assign(&som, &hlr)?, (som.m(), som.n()), &cfg.density.kde)?;
        let results = invert_attractors(
            &net,
            &som,
            layer,
            &map,
            cfg.density.top_k,
            cfg.density.min_percentile,
            &cfg.inversion,
        )?;
        let mut summary = String::from("rank,row,col,density,final_loss\n");
        for (a, r) in &results {
            let stem = format!("invert_{tag}_rank{}", a.rank);
            rec.write(&format!("{stem}.pgm"), &encode_pgm_unit(&r.image))?;
            rec.write(&format!("{stem}_loss.csv"), r.trace_csv().as_bytes())?;
            summary.push_str(&format!(
                "{},{},{},{},{}\n",
                a.rank, a.row, a.col, a.density, r.final_loss
            ));
        }
        rec.write(&format!("invert_{tag}.csv"), summary.as_bytes())?;
    }
    rec.finish("invert", cfg)
}

/// Every command in dependency order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<Manifest>> {
    let steps: [fn(&PipelineConfig) -> Result<Manifest>; 8] = [
        cmd_refnet_train,
        cmd_extract,
        cmd_train_som,
        cmd_density,
        cmd_class_density,
        cmd_cluster_score,
        cmd_attack,
        cmd_invert,
    ];
    steps.iter().map(|step| step(cfg)).collect()
}
