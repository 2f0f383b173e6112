//! Acceptance suite. Runs every criterion against the built-in reference
//! network and prints one PASS/FAIL line per criterion.
//!
//! The default pipeline is run once into a temporary directory and its
//! artifacts are shared by the criteria that need a trained network, HLR
//! sets or SOMs.

// Frozen oracle values are kept at the precision they were computed with.
#![allow(clippy::excessive_precision, clippy::approx_constant)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use fncode::adversarial::{
    displacement_experiment, pgd_attack, welch_t_test, DisplacementMetric, PgdConfig,
};
use fncode::clustering::{clustering_score_experiment, homogeneity_completeness_v, v_measure};
use fncode::config::PipelineConfig;
use fncode::density::{dead_unit_fraction, kde_density, Bandwidth, KdeBoundary, KdeOptions};
use fncode::hlr::{average_pool, read_hlr, HlrDataset};
use fncode::image::Image;
use fncode::inversion::{
    cosine_distance, invert_attractors, invert_code, InversionConfig, InversionInit,
};
use fncode::pipeline::{self, analysis_dataset, hlr_file, som_file, NET_FILE};
use fncode::refnet::{
    accuracy, load_refnet, LossSpec, ProbeLayer, RefNet, RefNetConfig, ShapeDataset,
};
use fncode::som::{
    init_grid, load_som, moving_average, train, update_step, BmuAssignment, Schedule, SomGrid,
    Topology, TrainConfig,
};

type Check = std::result::Result<String, String>;
/// Samples a and b, then the expected t, df and two-sided p.
type WelchCase = (&'static [f64], &'static [f64], f64, f64, f64);
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: PipelineConfig,
    net: RefNet,
    hlr: BTreeMap<ProbeLayer, HlrDataset>,
    som: BTreeMap<ProbeLayer, SomGrid>,
}

impl Fixture {
    fn build() -> Fixture {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = PipelineConfig {
            out_dir: dir.path().join("run-a"),
            ..Default::default()
        };
        pipeline::run_all(&cfg).expect("default pipeline run");
        let out = &cfg.out_dir;
        let net = load_refnet(out.join(NET_FILE)).expect("net");
        let mut hlr = BTreeMap::new();
        let mut som = BTreeMap::new();
        for l in ProbeLayer::ALL {
            hlr.insert(l, read_hlr(out.join(hlr_file(l))).expect("hlr"));
            som.insert(l, load_som(out.join(som_file(l))).expect("som"));
        }
        Fixture {
            _dir: dir,
            cfg,
            net,
            hlr,
            som,
        }
    }

    fn assignments(&self, layer: ProbeLayer) -> Vec<BmuAssignment> {
        self.som[&layer]
            .assign_all(self.hlr[&layer].vectors())
            .expect("assign")
    }
}

// ---------------------------------------------------------------------------

fn som_update_oracle() -> Check {
    let schedule = Schedule {
        alpha0: 0.5,
        sigma0: 1.0,
        tau_alpha: f64::INFINITY,
        tau_sigma: f64::INFINITY,
        epsilon_stab: 1e-8,
    };
    let mut grid = SomGrid::from_weights(2, 2, 2, Topology::Toroidal, vec![0.0; 8]).map_err(err)?;
    update_step(&mut grid, &[1.0, 0.0], 0, &schedule).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (r, c) in [(0, 1), (1, 0)] {
        let w = grid.weight(r, c).map_err(err)?;
        worst = worst
            .max((w[0] as f64 - 0.30327).abs())
            .max(w[1].abs() as f64);
    }
    let theta_ok = [0u64, 1, 10, 1000]
        .iter()
        .all(|&s| schedule.theta(0.0, s) == 1.0);
    let bmu_ok = grid.weight(0, 0).map_err(err)? == [0.5, 0.0];
    ensure(
        worst <= 1e-5 && theta_ok && bmu_ok,
        format!("max |w - 0.30327| = {worst:.2e}, theta(D=0) == 1: {theta_ok}, BMU -> (0.5, 0): {bmu_ok}"),
    )
}

fn torus_metric_axioms() -> Check {
    let mut checked = 0usize;
    for m in 1..=6 {
        for n in 1..=6 {
            let grid = init_grid(m, n, 1, 0, Topology::Toroidal).map_err(err)?;
            let cells: Vec<(usize, usize)> =
                (0..m).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
            let d: Vec<Vec<f64>> = cells
                .iter()
                .map(|&a| {
                    cells
                        .iter()
                        .map(|&b| grid.grid_distance(a, b).unwrap())
                        .collect()
                })
                .collect();
            for i in 0..cells.len() {
                if d[i][i] != 0.0 {
                    return Err(format!("{m}x{n}: d(a,a) != 0 at {:?}", cells[i]));
                }
                for j in 0..cells.len() {
                    if d[i][j] != d[j][i] {
                        return Err(format!(
                            "{m}x{n}: asymmetric at {:?},{:?}",
                            cells[i], cells[j]
                        ));
                    }
                    if i != j && d[i][j] <= 0.0 {
                        return Err(format!("{m}x{n}: zero distance between distinct cells"));
                    }
                    for k in 0..cells.len() {
                        if d[i][k] > d[i][j] + d[j][k] + 1e-12 {
                            return Err(format!(
                                "{m}x{n}: triangle violated for {:?},{:?},{:?}",
                                cells[i], cells[j], cells[k]
                            ));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{checked} triples on all grids up to 6x6"))
}

fn som_convergence(fx: &Fixture) -> Check {
    let hlr = &fx.hlr[&ProbeLayer::L2];
    let defaults = TrainConfig::default();
    let (m, n) = (fx.cfg.som.rows, fx.cfg.som.cols);
    let mut grid =
        init_grid(m, n, hlr.dim(), fx.cfg.som.init_seed, Topology::Toroidal).map_err(err)?;
    let trace = train(&mut grid, hlr, &defaults).map_err(err)?;
    let ma = moving_average(&trace).map_err(err)?;
    let last = *ma.last().ok_or("empty moving average")?;
    ensure(
        hlr.n_samples() >= 2000 && (m, n) == (20, 20) && trace.window == 1000 && last < 0.5,
        format!(
            "L2, {} samples, {m}x{n}, sigma0={} alpha0={}: final normalized MA = {last:.4}",
            hlr.n_samples(),
            defaults.sigma0,
            defaults.alpha0
        ),
    )
}

fn density_properties(fx: &Fixture) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut sets = 0;
    while sets < 100 {
        let (m, n) = (rng.gen_range(3..=30), rng.gen_range(3..=30));
        let count = rng.gen_range(2..=300);
        let a: Vec<BmuAssignment> = (0..count)
            .map(|i| BmuAssignment {
                sample_index: i,
                row: rng.gen_range(0..m),
                col: rng.gen_range(0..n),
                quantization_error: 0.0,
            })
            .collect();
        let opts = KdeOptions {
            bandwidth: if rng.gen_bool(0.3) {
                Bandwidth::Fixed(rng.gen_range(0.2..4.0))
            } else {
                Bandwidth::Scott
            },
            boundary: if rng.gen_bool(0.5) {
                KdeBoundary::Flat
            } else {
                KdeBoundary::Toroidal
            },
        };
        match kde_density(&a, (m, n), &opts) {
            Ok(map) => {
                worst = worst.max((map.total_mass() - 1.0).abs());
                sets += 1;
            }
            // Collinear draws have no Scott bandwidth; draw again.
            Err(fncode::Error::Numeric(_)) => continue,
            Err(e) => return Err(e.to_string()),
        }
    }
    let hlr = &fx.hlr[&ProbeLayer::L1];
    let dead = |m: usize, n: usize| -> Result<f64, String> {
        let mut grid =
            init_grid(m, n, hlr.dim(), fx.cfg.som.init_seed, Topology::Toroidal).map_err(err)?;
        train(&mut grid, hlr, &fx.cfg.som.train).map_err(err)?;
        Ok(dead_unit_fraction(
            &grid.assign_all(hlr.vectors()).map_err(err)?,
            (m, n),
        ))
    };
    let (d10, d30) = (dead(10, 10)?, dead(30, 30)?);
    ensure(
        worst <= 1e-6 && d30 > d10,
        format!("max |mass - 1| = {worst:.2e} over {sets} sets; L1 dead fraction 10x10 = {d10:.3}, 30x30 = {d30:.3}"),
    )
}

/// Entropy-based V-measure computed straight from a contingency table.
fn direct_v(truth: &[usize], pred: &[usize]) -> f64 {
    let kt = truth.iter().max().unwrap() + 1;
    let kp = pred.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0f64; kp]; kt];
    for (&t, &p) in truth.iter().zip(pred) {
        table[t][p] += 1.0;
    }
    let n = truth.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..kp).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let h = |v: &[f64]| -> f64 {
        v.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).ln())
            .sum()
    };
    let (ht, hp) = (h(&rows), h(&cols));
    let (mut ht_p, mut hp_t) = (0.0, 0.0);
    for i in 0..kt {
        for j in 0..kp {
            let c = table[i][j];
            if c > 0.0 {
                ht_p -= c / n * (c / cols[j]).ln();
                hp_t -= c / n * (c / rows[i]).ln();
            }
        }
    }
    let hom = if ht == 0.0 { 1.0 } else { 1.0 - ht_p / ht };
    let com = if hp == 0.0 { 1.0 } else { 1.0 - hp_t / hp };
    if hom + com == 0.0 {
        0.0
    } else {
        2.0 * hom * com / (hom + com)
    }
}

fn v_measure_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let len = rng.gen_range(2..=40);
        let (kt, kp) = (rng.gen_range(1..=5), rng.gen_range(1..=6));
        let t: Vec<usize> = (0..len).map(|_| rng.gen_range(0..kt)).collect();
        let p: Vec<usize> = (0..len).map(|_| rng.gen_range(0..kp)).collect();
        let tu: Vec<u32> = t.iter().map(|&v| v as u32).collect();
        let pu: Vec<u32> = p.iter().map(|&v| v as u32).collect();
        worst = worst.max((v_measure(&tu, &pu).map_err(err)? - direct_v(&t, &p)).abs());
    }
    // Frozen values from scikit-learn's homogeneity_completeness_v_measure.
    let frozen: [(&[u32], &[u32], [f64; 3]); 3] = [
        (
            &[0, 0, 1, 1, 2, 2],
            &[0, 0, 1, 1, 1, 1],
            [0.57938016428569528, 1.0, 0.7336804366512113],
        ),
        (
            &[3, 3, 3, 1, 1, 0, 0, 0, 0],
            &[0, 1, 0, 1, 0, 1, 0, 1, 2],
            [
                0.12882105054553727,
                0.14162275373804792,
                0.13491891201587114,
            ],
        ),
        (
            &[1, 2, 1, 2, 1, 2, 3, 3],
            &[5, 5, 5, 5, 7, 7, 7, 7],
            [
                0.19937391012057354,
                0.31127812445913278,
                0.24306468047070492,
            ],
        ),
    ];
    for (t, p, want) in frozen {
        let (h, c, v) = homogeneity_completeness_v(t, p).map_err(err)?;
        for (got, w) in [h, c, v].into_iter().zip(want) {
            worst = worst.max((got - w).abs());
        }
    }
    let truth: Vec<u32> = vec![0, 0, 1, 1, 2, 2, 3];
    let relabeled: Vec<u32> = vec![9, 9, 4, 4, 7, 7, 1];
    let perfect = v_measure(&truth, &relabeled).map_err(err)?;
    let single = v_measure(&truth, &[0u32; 7]).map_err(err)?;
    ensure(
        worst <= 1e-10 && perfect == 1.0 && single == 0.0,
        format!("max deviation {worst:.2e} over 50 random + 3 frozen labelings; perfect = {perfect}, single cluster = {single}"),
    )
}

fn depth_trend(fx: &Fixture) -> Check {
    let train_set = ShapeDataset::generate(&fx.cfg.data.train).map_err(err)?;
    let acc = accuracy(&fx.net, &train_set).map_err(err)?;
    let params = fx.cfg.cluster.params();
    let mut means = Vec::new();
    for l in ProbeLayer::ALL {
        let hlr = &fx.hlr[&l];
        let report = clustering_score_experiment(
            &fx.assignments(l),
            hlr.labels().ok_or("unlabeled HLR")?,
            fx.som[&l].n_units(),
            &params,
        )
        .map_err(err)?;
        means.push(report.mean);
    }
    ensure(
        params.n_seeds == 5 && acc >= 0.9 && means[1] > means[0],
        format!(
            "train accuracy {acc:.4}; mean V over {} seeds: L1 = {:.4}, L2 = {:.4}",
            params.n_seeds, means[0], means[1]
        ),
    )
}

fn pgd_containment(fx: &Fixture) -> Check {
    let n_classes = fx.net.config().n_classes;
    let violations: Vec<String> = (0..1000u64)
        .into_par_iter()
        .map(|i| -> Result<Option<String>, String> {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + i);
            let clip_min = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..0.3) };
            let clip_max = if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.7..1.0) };
            let eps = match rng.gen_range(0..10) {
                0 => 0.0,
                _ => rng.gen_range(0.0..0.3),
            };
            let targeted = rng.gen_bool(0.5);
            let cfg = PgdConfig {
                eps,
                n_iter: rng.gen_range(1..=8),
                step: rng.gen_range(0.001..0.1),
                rand_init: rng.gen_bool(0.5),
                targeted,
                target_class: targeted.then(|| rng.gen_range(0..n_classes)),
                clip_min,
                clip_max,
                seed: i,
            };
            let x = Image::new(16, 16, (0..256).map(|_| rng.gen_range(clip_min..=clip_max)).collect()).map_err(err)?;
            let adv = pgd_attack(&fx.net, &x, rng.gen_range(0..n_classes), &cfg).map_err(err)?;
            let linf = adv.max_abs_diff(&x);
            let in_bounds = adv.pixels.iter().all(|&p| p >= clip_min && p <= clip_max);
            let identity_ok = eps > 0.0 || adv == x;
            Ok((linf > eps + 1e-7 || !in_bounds || !identity_ok)
                .then(|| format!("attack {i}: linf {linf} eps {eps} in_bounds {in_bounds} identity {identity_ok}")))
        })
        .collect::<Result<Vec<_>, String>>()?
        .into_iter()
        .flatten()
        .collect();
    let x = analysis_dataset(&fx.cfg).map_err(err)?.images[0].clone();
    let zero_identity = [true, false].iter().all(|&rand_init| {
        let cfg = PgdConfig {
            eps: 0.0,
            rand_init,
            target_class: Some(3),
            ..Default::default()
        };
        pgd_attack(&fx.net, &x, 0, &cfg)
            .map(|a| a == x)
            .unwrap_or(false)
    });
    ensure(
        violations.is_empty() && zero_identity,
        format!(
            "{} violations in 1000 random attacks; eps=0 identity: {zero_identity}{}",
            violations.len(),
            violations
                .first()
                .map(|v| format!(" (first: {v})"))
                .unwrap_or_default()
        ),
    )
}

fn displacement_trend(fx: &Fixture) -> Check {
    let data = analysis_dataset(&fx.cfg).map_err(err)?;
    let n = fx.cfg.attack.n_pairs;
    let som = &fx.som[&ProbeLayer::L1];
    let report = displacement_experiment(
        &fx.net,
        &[(ProbeLayer::L1, som)],
        &data.images[..n],
        &data.labels[..n],
        &[0.0, 0.01, 0.08],
        &fx.cfg.attack.pgd,
        DisplacementMetric::Grid,
    )
    .map_err(err)?;
    let curve = &report.curves[0];
    let zero_ok = curve.distances[0].iter().all(|&d| d == 0.0);
    let (m01, m08) = (curve.mean[1], curve.mean[2]);
    ensure(
        n >= 100 && zero_ok && m08 >= m01,
        format!("L1 over {n} pairs: mean displacement eps 0.01 = {m01:.4}, eps 0.08 = {m08:.4}; eps 0 all zero: {zero_ok}"),
    )
}

/// Max over pixels of |analytic − numeric| / max(|analytic|, |numeric|),
/// skipping pixels where both are below `floor`. The floor sits above the
/// rounding noise of the central difference (about 1e-10 at h = 1e-6), which
/// would otherwise turn an exactly-zero analytic entry into relative error 1.
fn gradient_error(
    net: &RefNet,
    x: &Image,
    spec: &LossSpec,
    h: f64,
    floor: f64,
) -> Result<f64, String> {
    let (_, g) = net.backward_input(x, spec).map_err(err)?;
    let mut worst: f64 = 0.0;
    for k in 0..x.pixels.len() {
        let mut plus = x.clone();
        plus.pixels[k] += h;
        let mut minus = x.clone();
        minus.pixels[k] -= h;
        let fd = (net.loss(&plus, spec).map_err(err)? - net.loss(&minus, spec).map_err(err)?)
            / (2.0 * h);
        let scale = fd.abs().max(g.pixels[k].abs());
        if scale > floor {
            worst = worst.max((fd - g.pixels[k]).abs() / scale);
        }
    }
    Ok(worst)
}

fn gradient_correctness() -> Check {
    let results: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + i);
            let side = [4, 8, 12][rng.gen_range(0..3)];
            let cfg = RefNetConfig {
                height: side,
                width: side,
                c1: rng.gen_range(2..=4),
                c2: rng.gen_range(2..=5),
                kernel: [1, 3, 5][rng.gen_range(0..3)],
                n_classes: rng.gen_range(2..=5),
            };
            let x = Image::new(side, side, (0..side * side).map(|_| rng.gen()).collect())
                .map_err(err)?;
            let layer = if rng.gen_bool(0.5) {
                ProbeLayer::L1
            } else {
                ProbeLayer::L2
            };
            // The cosine objective is undefined when every probe unit is
            // inactive, so draw weights until one fires on `x`.
            let mut seed = 900 + i;
            let net = loop {
                let net = RefNet::new(cfg, seed).map_err(err)?;
                if net
                    .forward(&x)
                    .map_err(err)?
                    .probe(layer)
                    .values
                    .iter()
                    .any(|&v| v > 0.0)
                {
                    break net;
                }
                seed += 1000;
            };
            let ce = LossSpec::CrossEntropy {
                target: rng.gen_range(0..cfg.n_classes),
            };
            let code: Vec<f64> = (0..net.probe_dim(layer))
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let cos = LossSpec::CosineToCode { layer, code };
            Ok((
                gradient_error(&net, &x, &ce, 1e-6, 1e-7)?,
                gradient_error(&net, &x, &cos, 1e-6, 1e-7)?,
            ))
        })
        .collect::<Result<_, String>>()?;
    let ce = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let cos = results.iter().map(|r| r.1).fold(0.0, f64::max);
    ensure(
        ce <= 1e-4 && cos <= 1e-4,
        format!("max relative error over 20 nets: cross-entropy {ce:.2e}, cosine {cos:.2e}"),
    )
}

fn welch_oracle() -> Check {
    // t, df and two-sided p computed with mpmath at 50 significant digits.
    let cases: [WelchCase; 10] = [
        (
            &[0.0, 0.0, 0.0, 0.0, 1.0],
            &[10.0, 10.0, 10.0, 10.0, 11.0],
            -35.355339059327376,
            8.0,
            4.4833555201613793e-10,
        ),
        (
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            &[2.0, 3.0, 4.0, 5.0, 6.5],
            -1.0440737953277489,
            7.9221990033756631,
            0.32726038574240442,
        ),
        (
            &[0.5, 1.5, 0.7, 1.1],
            &[0.9, 1.4, 1.2, 1.3, 1.0, 1.25],
            -0.95831484749990975,
            3.7382369118313531,
            0.39569235606809003,
        ),
        (
            &[3.1, 2.9, 3.3, 3.0, 2.8, 3.2, 3.05],
            &[3.4, 3.6, 3.2, 3.9, 3.5],
            -3.546117956536392,
            6.4580379876836528,
            0.010731307145237988,
        ),
        (
            &[10.0, 12.0, 9.0, 11.0, 13.0, 10.0, 12.0, 11.0],
            &[8.0, 7.0, 9.0, 6.0, 10.0],
            3.5496478698597696,
            7.3878627968337731,
            0.0085546197394152255,
        ),
        (
            &[1.0, 1.0, 2.0],
            &[1.0, 2.0, 2.0],
            -0.70710678118654752,
            4.0,
            0.51851851851851852,
        ),
        (
            &[-1.5, 0.2, 2.3, -0.7, 1.1, 0.0],
            &[5.0, -4.0, 3.0, -2.0, 6.0, -5.0, 1.0],
            -0.19500682332727313,
            7.2893732279970635,
            0.85071212965202802,
        ),
        (
            &[100.0, 101.0, 99.5, 100.5],
            &[100.2, 100.1, 100.4, 99.9, 100.3, 100.0, 100.25],
            0.26017374808284318,
            3.2541722172990534,
            0.81033472400818951,
        ),
        (
            &[
                0.01, 0.02, 0.015, 0.03, 0.012, 0.018, 0.022, 0.019, 0.025, 0.011,
            ],
            &[0.05, 0.07, 0.06, 0.04, 0.08],
            -5.681483183997538,
            4.6737338646534868,
            0.0029232245381456585,
        ),
        (
            &[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0],
            &[1.0, 3.0, 3.0, 5.0, 6.0, 6.0, 8.0, 10.0, 12.0],
            -0.71422787504400761,
            13.353699672069635,
            0.48738400415554782,
        ),
    ];
    let (mut dt, mut dp): (f64, f64) = (0.0, 0.0);
    for (a, b, t, _df, p) in cases {
        let r = welch_t_test(a, b).map_err(err)?;
        dt = dt.max((r.t - t).abs());
        dp = dp.max((r.p - p).abs());
    }
    let same = welch_t_test(&[0.3, 1.2, 0.8, 2.2], &[0.3, 1.2, 0.8, 2.2]).map_err(err)?;
    ensure(
        dt <= 1e-6 && dp <= 1e-6 && same.t == 0.0 && same.p == 1.0,
        format!(
            "max |dt| = {dt:.2e}, max |dp| = {dp:.2e}; identical samples t = {}, p = {}",
            same.t, same.p
        ),
    )
}

fn inversion_sanity(fx: &Fixture) -> Check {
    let data = analysis_dataset(&fx.cfg).map_err(err)?;
    let mut worst_optimum: f64 = 0.0;
    for (i, l) in [
        (0usize, ProbeLayer::L1),
        (5, ProbeLayer::L2),
        (11, ProbeLayer::L2),
    ] {
        let img = &data.images[i];
        let target = average_pool(fx.net.forward(img).map_err(err)?.probe(l)).map_err(err)?;
        let cfg = InversionConfig {
            init: InversionInit::Image(img.clone()),
            ..fx.cfg.inversion.clone()
        };
        let r = invert_code(&fx.net, l, &target, &cfg).map_err(err)?;
        worst_optimum = worst_optimum.max(r.final_loss);
    }

    let layer = ProbeLayer::L2;
    let som = &fx.som[&layer];
    let map = kde_density(
        &fx.assignments(layer),
        (som.m(), som.n()),
        &fx.cfg.density.kde,
    )
    .map_err(err)?;
    let results = invert_attractors(
        &fx.net,
        som,
        layer,
        &map,
        fx.cfg.density.top_k,
        fx.cfg.density.min_percentile,
        &fx.cfg.inversion,
    )
    .map_err(err)?;
    let targets: Vec<Vec<f64>> = results
        .iter()
        .map(|(a, _)| {
            som.weight(a.row, a.col)
                .unwrap()
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let pooled: Vec<Vec<f64>> = results
        .iter()
        .map(|(_, r)| average_pool(fx.net.forward(&r.image).unwrap().probe(layer)).unwrap())
        .collect();
    let mut pairs = 0;
    let mut separated = 0;
    for i in 0..results.len() {
        for j in (i + 1)..results.len() {
            pairs += 1;
            let own_i = cosine_distance(&pooled[i], &targets[i]).map_err(err)?;
            let cross_i = cosine_distance(&pooled[i], &targets[j]).map_err(err)?;
            let own_j = cosine_distance(&pooled[j], &targets[j]).map_err(err)?;
            let cross_j = cosine_distance(&pooled[j], &targets[i]).map_err(err)?;
            separated += (own_i < cross_i && own_j < cross_j) as usize;
        }
    }
    ensure(
        worst_optimum < 1e-3 && pairs >= 1 && separated == pairs,
        format!(
            "optimum-init final loss max {worst_optimum:.2e}; {separated}/{pairs} L2 attractor pairs separated ({} attractors)",
            results.len()
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
}

fn reproducibility(fx: &Fixture) -> Check {
    let second = PipelineConfig {
        out_dir: fx.cfg.out_dir.with_file_name("run-b"),
        ..fx.cfg.clone()
    };
    pipeline::run_all(&second).map_err(err)?;
    let a = csv_files(&fx.cfg.out_dir);
    let b = csv_files(&second.out_dir);
    let names = |v: &[PathBuf]| {
        v.iter()
            .map(|p| p.file_name().unwrap().to_owned())
            .collect::<Vec<_>>()
    };
    if names(&a) != names(&b) {
        return Err("runs produced different CSV file sets".into());
    }
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| fs::read(x).unwrap() != fs::read(y).unwrap())
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    ensure(
        differing.is_empty(),
        format!(
            "{} CSV files compared, {} differ {:?}",
            a.len(),
            differing.len(),
            differing
        ),
    )
}

fn untargeted_misclassification_trend(fx: &Fixture) -> Check {
    let data = analysis_dataset(&fx.cfg).map_err(err)?;
    let n = fx.cfg.attack.n_pairs;
    let template = PgdConfig {
        targeted: false,
        ..fx.cfg.attack.pgd.clone()
    };
    let report = displacement_experiment(
        &fx.net,
        &[(ProbeLayer::L1, &fx.som[&ProbeLayer::L1])],
        &data.images[..n],
        &data.labels[..n],
        &[0.01, 0.08],
        &template,
        DisplacementMetric::Grid,
    )
    .map_err(err)?;
    let (lo, hi) = (report.misclassification[0], report.misclassification[1]);
    ensure(
        hi >= lo,
        format!("untargeted misclassification eps 0.01 = {lo:.3}, eps 0.08 = {hi:.3}"),
    )
}

fn main() {
    let start = Instant::now();
    let fx = Fixture::build();
    println!(
        "fixture: default pipeline run in {:.1}s",
        start.elapsed().as_secs_f64()
    );

    let criteria: Vec<Criterion> = vec![
        ("som-update-oracle", Box::new(som_update_oracle)),
        ("torus-metric-axioms", Box::new(torus_metric_axioms)),
        ("som-convergence", Box::new(|| som_convergence(&fx))),
        ("density-properties", Box::new(|| density_properties(&fx))),
        ("v-measure-oracle", Box::new(v_measure_oracle)),
        ("depth-trend", Box::new(|| depth_trend(&fx))),
        ("pgd-containment", Box::new(|| pgd_containment(&fx))),
        ("displacement-trend", Box::new(|| displacement_trend(&fx))),
        ("gradient-correctness", Box::new(gradient_correctness)),
        ("welch-oracle", Box::new(welch_oracle)),
        ("inversion-sanity", Box::new(|| inversion_sanity(&fx))),
        ("reproducibility", Box::new(|| reproducibility(&fx))),
        (
            "derived: untargeted-misclassification-trend",
            Box::new(|| untargeted_misclassification_trend(&fx)),
        ),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
