//! Gaussian kernel density of BMU locations over the SOM lattice, density
//! attractors, and dead-unit counting.
//!
//! BMU coordinates are treated as flat 2-D points by default. The toroidal
//! option measures kernel distances with wrap-around instead; attractor
//! neighborhoods always wrap.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::encode_pgm;
use crate::som::BmuAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Bandwidth {
    /// `n^(-1/6) · σ̂` per axis, σ̂ the sample standard deviation.
    #[default]
    Scott,
    /// Same bandwidth on both axes, in grid units.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KdeBoundary {
    #[default]
    Flat,
    Toroidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct KdeOptions {
    pub bandwidth: Bandwidth,
    pub boundary: KdeBoundary,
}

/// KDE evaluated at every cell center, normalized so the values sum to one
/// (unit cell area).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub m: usize,
    pub n: usize,
    pub values: Vec<f64>,
    /// Kernel bandwidth along rows and columns.
    pub bandwidth: (f64, f64),
}

impl DensityMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.n, best % self.n)
    }

    /// Headerless CSV, one line per grid row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks_exact(self.n) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// 8-bit min-max scaled heatmap.
    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.m, self.n, &self.values)
    }
}

fn cell_counts(assignments: &[BmuAssignment], m: usize, n: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; m * n];
    for a in assignments {
        if a.row >= m || a.col >= n {
            return Err(Error::invalid(format!(
                "assignment ({}, {}) outside {m}x{n} grid",
                a.row, a.col
            )));
        }
        counts[a.row * n + a.col] += 1;
    }
    Ok(counts)
}

/// Sample standard deviation (n − 1) per axis, computed from the cell
/// histogram so the result does not depend on assignment order.
fn axis_std(counts: &[usize], n: usize, total: usize) -> (f64, f64) {
    let (mut sr, mut sc) = (0.0, 0.0);
    for (idx, &c) in counts.iter().enumerate() {
        sr += (idx / n) as f64 * c as f64;
        sc += (idx % n) as f64 * c as f64;
    }
    let (mr, mc) = (sr / total as f64, sc / total as f64);
    let (mut vr, mut vc) = (0.0, 0.0);
    for (idx, &c) in counts.iter().enumerate() {
        vr += c as f64 * ((idx / n) as f64 - mr).powi(2);
        vc += c as f64 * ((idx % n) as f64 - mc).powi(2);
    }
    let dof = (total - 1) as f64;
    ((vr / dof).sqrt(), (vc / dof).sqrt())
}

/// Gaussian KDE of BMU positions evaluated on the `m × n` lattice.
pub fn kde_density(
    assignments: &[BmuAssignment],
    shape: (usize, usize),
    opts: &KdeOptions,
) -> Result<DensityMap> {
    let (m, n) = shape;
    if m == 0 || n == 0 {
        return Err(Error::invalid("grid shape must be positive"));
    }
    if assignments.len() < 2 {
        return Err(Error::invalid(format!(
            "KDE needs at least 2 assignments, got {}",
            assignments.len()
        )));
    }
    let counts = cell_counts(assignments, m, n)?;
    let bandwidth = match opts.bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::invalid(format!(
                    "fixed bandwidth must be > 0, got {h}"
                )));
            }
            (h, h)
        }
        Bandwidth::Scott => {
            let (sr, sc) = axis_std(&counts, n, assignments.len());
            if sr == 0.0 || sc == 0.0 {
                return Err(Error::Numeric(
                    "degenerate covariance: BMUs do not spread along both grid axes; \
                     pass a fixed bandwidth instead"
                        .into(),
                ));
            }
            let factor = (assignments.len() as f64).powf(-1.0 / 6.0);
            (sr * factor, sc * factor)
        }
    };
    let occupied: Vec<(usize, usize, f64)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i / n, i % n, c as f64))
        .collect();
    let wrap = |d: usize, extent: usize| match opts.boundary {
        KdeBoundary::Flat => d,
        KdeBoundary::Toroidal => d.min(extent - d),
    };
    let (hr2, hc2) = (2.0 * bandwidth.0.powi(2), 2.0 * bandwidth.1.powi(2));
    let mut values: Vec<f64> = (0..m * n)
        .into_par_iter()
        .map(|cell| {
            let (r, c) = (cell / n, cell % n);
            occupied
                .iter()
                .map(|&(pr, pc, w)| {
                    let dr = wrap(r.abs_diff(pr), m) as f64;
                    let dc = wrap(c.abs_diff(pc), n) as f64;
                    w * (-(dr * dr) / hr2 - (dc * dc) / hc2).exp()
                })
                .sum::<f64>()
        })
        .collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric("density underflowed on every cell".into()));
    }
    for v in &mut values {
        *v /= total;
    }
    Ok(DensityMap {
        m,
        n,
        values,
        bandwidth,
    })
}

/// [`kde_density`] restricted to samples of one class.
pub fn class_density(
    assignments: &[BmuAssignment],
    labels: &[u32],
    class: u32,
    shape: (usize, usize),
    opts: &KdeOptions,
) -> Result<DensityMap> {
    if labels.len() != assignments.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} assignments",
            labels.len(),
            assignments.len()
        )));
    }
    let subset: Vec<BmuAssignment> = assignments
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == class)
        .map(|(a, _)| *a)
        .collect();
    if subset.is_empty() {
        let available: Vec<u32> = labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        return Err(Error::invalid(format!(
            "class {class} not present; available classes: {available:?}"
        )));
    }
    if subset.len() < 2 {
        return Err(Error::invalid(format!(
            "class {class} has a single sample; KDE needs at least 2"
        )));
    }
    kde_density(&subset, shape, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Attractor {
    pub row: usize,
    pub col: usize,
    pub density: f64,
    /// 1 for the densest attractor.
    pub rank: usize,
}

/// Value at `pct` percent of the sorted values, interpolating linearly.
fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (pct.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Local maxima of the density map. A cell qualifies when it is at least as
/// dense as its 8 wrap-around neighbors and at least the `min_percentile`
/// percentile of all values. Plateaus yield every tied cell. Results are
/// ordered by density, ties by row-major index, and truncated to `top_k`.
pub fn find_attractors(
    map: &DensityMap,
    top_k: usize,
    min_percentile: f64,
) -> Result<Vec<Attractor>> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be >= 1"));
    }
    let (m, n) = (map.m, map.n);
    let threshold = percentile(&map.values, min_percentile);
    let mut found: Vec<(usize, f64)> = Vec::new();
    for r in 0..m {
        for c in 0..n {
            let v = map.get(r, c);
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dr in [m - 1, 0, 1] {
                for dc in [n - 1, 0, 1] {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    if map.get((r + dr) % m, (c + dc) % n) > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                found.push((r * n + c, v));
            }
        }
    }
    found.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(found
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (idx, density))| Attractor {
            row: idx / n,
            col: idx % n,
            density,
            rank: i + 1,
        })
        .collect())
}

/// Fraction of grid cells no sample selected as BMU.
pub fn dead_unit_fraction(assignments: &[BmuAssignment], shape: (usize, usize)) -> f64 {
    let (m, n) = shape;
    let hit: BTreeSet<(usize, usize)> = assignments
        .iter()
        .filter(|a| a.row < m && a.col < n)
        .map(|a| (a.row, a.col))
        .collect();
    1.0 - hit.len() as f64 / (m * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn at(cells: &[(usize, usize)]) -> Vec<BmuAssignment> {
        cells
            .iter()
            .enumerate()
            .map(|(i, &(row, col))| BmuAssignment {
                sample_index: i,
                row,
                col,
                quantization_error: 0.0,
            })
            .collect()
    }

    fn cluster(center: (usize, usize), reps: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for _ in 0..reps {
            for dr in 0..3 {
                for dc in 0..3 {
                    v.push((center.0 + dr - 1, center.1 + dc - 1));
                }
            }
            v.push(center);
        }
        v
    }

    #[test]
    fn tight_cluster_peaks_at_center() {
        let map = kde_density(&at(&cluster((6, 4), 3)), (12, 12), &KdeOptions::default()).unwrap();
        let (r, c) = map.argmax();
        assert!(
            r.abs_diff(6) <= 1 && c.abs_diff(4) <= 1,
            "peak at ({r}, {c})"
        );
        assert_abs_diff_eq!(map.total_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_assignments_on_torus_are_flat() {
        let cells: Vec<_> = (0..10).flat_map(|r| (0..10).map(move |c| (r, c))).collect();
        let opts = KdeOptions {
            boundary: KdeBoundary::Toroidal,
            ..Default::default()
        };
        let map = kde_density(&at(&cells), (10, 10), &opts).unwrap();
        let max = map.values.iter().copied().fold(0.0, f64::max);
        let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.5, "ratio {}", max / min);
    }

    #[test]
    fn uniform_assignments_flat_boundary_interior_is_flat() {
        // Flat kernels lose mass over the edges; the interior stays level.
        let cells: Vec<_> = (0..20).flat_map(|r| (0..20).map(move |c| (r, c))).collect();
        let map = kde_density(&at(&cells), (20, 20), &KdeOptions::default()).unwrap();
        let interior: Vec<f64> = (6..14)
            .flat_map(|r| (6..14).map(move |c| (r, c)))
            .map(|(r, c)| map.get(r, c))
            .collect();
        let max = interior.iter().copied().fold(0.0, f64::max);
        let min = interior.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.5);
    }

    #[test]
    fn mirror_symmetric_clusters_have_equal_peaks() {
        let mut cells = cluster((5, 3), 2);
        cells.extend(cluster((5, 16), 2));
        let map = kde_density(&at(&cells), (11, 20), &KdeOptions::default()).unwrap();
        let attractors = find_attractors(&map, 5, 50.0).unwrap();
        assert_eq!(attractors.len(), 2);
        assert_abs_diff_eq!(attractors[0].density, attractors[1].density, epsilon = 1e-6);
        let mut cells: Vec<_> = attractors.iter().map(|a| (a.row, a.col)).collect();
        cells.sort();
        assert_eq!(cells, vec![(5, 3), (5, 16)]);
    }

    #[test]
    fn degenerate_covariance_requests_fixed_bandwidth() {
        let same = at(&[(2, 2), (2, 2), (2, 2)]);
        match kde_density(&same, (5, 5), &KdeOptions::default()) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("fixed bandwidth")),
            other => panic!("{other:?}"),
        }
        let fixed = KdeOptions {
            bandwidth: Bandwidth::Fixed(1.0),
            ..Default::default()
        };
        let map = kde_density(&same, (5, 5), &fixed).unwrap();
        assert_eq!(map.argmax(), (2, 2));
    }

    #[test]
    fn too_few_assignments() {
        assert!(kde_density(&at(&[(0, 0)]), (3, 3), &KdeOptions::default()).is_err());
    }

    #[test]
    fn class_density_single_class_equals_full() {
        let a = at(&cluster((4, 4), 2));
        let labels = vec![3u32; a.len()];
        let full = kde_density(&a, (9, 9), &KdeOptions::default()).unwrap();
        let cls = class_density(&a, &labels, 3, (9, 9), &KdeOptions::default()).unwrap();
        assert_eq!(full, cls);
    }

    #[test]
    fn class_density_absent_class_lists_available() {
        let a = at(&[(0, 0), (1, 1)]);
        let err = class_density(&a, &[1, 4], 2, (3, 3), &KdeOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("[1, 4]"), "{err}");
    }

    #[test]
    fn class_mass_concentrates_in_its_region() {
        let mut cells = cluster((4, 4), 3);
        let n0 = cells.len();
        cells.extend(cluster((15, 15), 3));
        let labels: Vec<u32> = (0..cells.len()).map(|i| (i >= n0) as u32).collect();
        let a = at(&cells);
        let opts = KdeOptions::default();
        let d0 = class_density(&a, &labels, 0, (20, 20), &opts).unwrap();
        let d1 = class_density(&a, &labels, 1, (20, 20), &opts).unwrap();
        // Bounding box rows/cols 3..=5 plus one bandwidth of margin.
        let margin = d0.bandwidth.0.max(d0.bandwidth.1).ceil() as usize;
        let (lo, hi) = (3 - margin, 5 + margin);
        let mut mass = 0.0;
        for r in lo..=hi {
            for c in lo..=hi {
                mass += d0.get(r, c);
            }
        }
        assert!(mass >= 0.8, "mass {mass}");
        assert_ne!(d0.argmax(), d1.argmax());
    }

    #[test]
    fn attractors_unimodal_and_constant() {
        let map = kde_density(&at(&cluster((3, 3), 4)), (8, 8), &KdeOptions::default()).unwrap();
        let a = find_attractors(&map, 5, 0.0).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].row, a[0].col, a[0].rank), (3, 3, 1));

        let flat = DensityMap {
            m: 3,
            n: 3,
            values: vec![1.0 / 9.0; 9],
            bandwidth: (1.0, 1.0),
        };
        let a = find_attractors(&flat, 4, 50.0).unwrap();
        let idx: Vec<usize> = a.iter().map(|x| x.row * 3 + x.col).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn attractors_ranked_by_height() {
        // Two analytic bumps of heights 2 and 1 on a 12x12 grid.
        let (m, n) = (12, 12);
        let bump = |r: usize, c: usize, cr: f64, cc: f64, h: f64| {
            h * (-((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / 2.0).exp()
        };
        let values: Vec<f64> = (0..m * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                bump(r, c, 3.0, 3.0, 1.0) + bump(r, c, 8.0, 8.0, 2.0)
            })
            .collect();
        let map = DensityMap {
            m,
            n,
            values,
            bandwidth: (1.0, 1.0),
        };
        let a = find_attractors(&map, 10, 50.0).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].row, a[0].col), (8, 8));
        assert_eq!((a[1].row, a[1].col), (3, 3));
        assert!(find_attractors(&map, 0, 0.0).is_err());
    }

    #[test]
    fn dead_units() {
        let all: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        assert_eq!(dead_unit_fraction(&at(&all), (3, 3)), 0.0);
        assert_eq!(dead_unit_fraction(&[], (3, 3)), 1.0);
        let some: Vec<_> = (0..37)
            .map(|i| (i / 10, i % 10))
            .chain([(0, 0), (1, 1)])
            .collect();
        assert_abs_diff_eq!(
            dead_unit_fraction(&at(&some), (10, 10)),
            0.63,
            epsilon = 1e-12
        );
    }

    #[test]
    fn csv_layout() {
        let map = DensityMap {
            m: 2,
            n: 3,
            values: vec![0.5, 0.0, 0.25, 0.125, 0.0625, 0.0625],
            bandwidth: (1.0, 1.0),
        };
        assert_eq!(map.to_csv(), "0.5,0,0.25\n0.125,0.0625,0.0625\n");
        assert_eq!(map.to_pgm().len(), b"P5\n3 2\n255\n".len() + 6);
    }

    proptest! {
        #[test]
        fn normalized_and_order_invariant(
            cells in prop::collection::vec((0usize..9, 0usize..7), 2..60),
            toroidal in any::<bool>(),
        ) {
            let opts = KdeOptions {
                bandwidth: Bandwidth::Fixed(1.3),
                boundary: if toroidal { KdeBoundary::Toroidal } else { KdeBoundary::Flat },
            };
            let a = at(&cells);
            let map = kde_density(&a, (9, 7), &opts).unwrap();
            prop_assert!((map.total_mass() - 1.0).abs() < 1e-9);
            prop_assert!(map.values.iter().all(|v| v.is_finite() && *v >= 0.0));
            let mut rev = a.clone();
            rev.reverse();
            prop_assert_eq!(kde_density(&rev, (9, 7), &opts).unwrap(), map);
        }
    }
}
