//! k-means over BMU coordinates and V-measure agreement with class labels.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::som::BmuAssignment;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Point>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &Point, centroids: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_count(points: &[Point]) -> usize {
    points
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect::<HashSet<_>>()
        .len()
}

/// k-means++ seeding: first centroid uniform, then proportional to squared
/// distance from the nearest chosen centroid.
fn seed_centroids(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            // Rounding can walk off the end; fall back to the farthest point.
            if d2[idx] == 0.0 {
                idx = farthest(&d2);
            }
            idx
        } else {
            farthest(&d2)
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn farthest(d2: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in d2.iter().enumerate() {
        if d > d2[best] {
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops when no centroid moves more
/// than `tol` or after `max_iter` iterations. A cluster that empties out is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(
    points: &[Point],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if points
        .iter()
        .any(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        return Err(Error::invalid("points must be finite"));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of distinct points ({distinct})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignments[i] = j;
            dists[i] = d;
        }
        let inertia: f64 = dists.iter().sum();
        debug_assert!(
            history
                .last()
                .is_none_or(|&prev: &f64| inertia <= prev * (1.0 + 1e-12) + 1e-12),
            "k-means inertia increased"
        );
        history.push(inertia);

        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            sums[j][0] += p[0];
            sums[j][1] += p[1];
            counts[j] += 1;
        }
        let mut shift = 0.0f64;
        let mut reseeded = false;
        for j in 0..k {
            let next = if counts[j] == 0 {
                reseeded = true;
                let idx = farthest(&dists);
                dists[idx] = 0.0;
                assignments[idx] = j;
                points[idx]
            } else {
                [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64]
            };
            shift = shift.max(dist2(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if (!reseeded && shift < tol) || iterations >= max_iter {
            break;
        }
    }
    // Final assignment against the last centroids so every point sits with
    // its nearest centroid.
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        assignments[i] = j;
        inertia += d;
    }
    Ok(ClusterResult {
        k,
        assignments,
        centroids,
        inertia,
        seed,
        iterations,
        inertia_history: history,
    })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Conditional entropy of one labeling given the other, where `given` picks
/// the conditioning label out of a (truth, pred) cell.
fn conditional_entropy(
    joint: &BTreeMap<(u64, u64), usize>,
    given_counts: &BTreeMap<u64, usize>,
    n: f64,
    given: impl Fn(&(u64, u64)) -> u64,
) -> f64 {
    joint
        .iter()
        .map(|(cell, &c)| {
            let nc = c as f64;
            -(nc / n) * (nc / given_counts[&given(cell)] as f64).ln()
        })
        .sum()
}

/// Homogeneity, completeness and V-measure of `predicted` against `truth`.
pub fn homogeneity_completeness_v<T, P>(truth: &[T], predicted: &[P]) -> Result<(f64, f64, f64)>
where
    T: Copy + Into<u64>,
    P: Copy + Into<u64>,
{
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "label lengths differ: {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("labelings must be non-empty"));
    }
    let n = truth.len() as f64;
    let mut tc: BTreeMap<u64, usize> = BTreeMap::new();
    let mut pc: BTreeMap<u64, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        let (t, p) = (t.into(), p.into());
        *tc.entry(t).or_default() += 1;
        *pc.entry(p).or_default() += 1;
        *joint.entry((t, p)).or_default() += 1;
    }
    let h_truth = entropy(tc.values().copied(), n);
    let h_pred = entropy(pc.values().copied(), n);
    let h_truth_given_pred = conditional_entropy(&joint, &pc, n, |&(_, p)| p);
    let h_pred_given_truth = conditional_entropy(&joint, &tc, n, |&(t, _)| t);
    let h = if h_truth == 0.0 {
        1.0
    } else {
        1.0 - h_truth_given_pred / h_truth
    };
    let c = if h_pred == 0.0 {
        1.0
    } else {
        1.0 - h_pred_given_truth / h_pred
    };
    let v = if h + c == 0.0 {
        0.0
    } else {
        2.0 * h * c / (h + c)
    };
    Ok((h, c, v.clamp(0.0, 1.0)))
}

/// Harmonic mean of homogeneity and completeness; invariant to relabeling.
pub fn v_measure<T, P>(truth: &[T], predicted: &[P]) -> Result<f64>
where
    T: Copy + Into<u64>,
    P: Copy + Into<u64>,
{
    Ok(homogeneity_completeness_v(truth, predicted)?.2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VScoreReport {
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `scores`.
    pub std: f64,
}

impl VScoreReport {
    pub fn from_scores(seeds: Vec<u64>, scores: Vec<f64>) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        VScoreReport {
            seeds,
            scores,
            mean,
            std: var.sqrt(),
        }
    }

    /// CSV rows `layer_tag,seed,score` followed by `layer_tag,mean,<m>` and
    /// `layer_tag,std,<s>`.
    pub fn to_csv(&self, layer_tag: &str) -> String {
        let mut out = String::from("layer_tag,seed,score\n");
        for (s, v) in self.seeds.iter().zip(&self.scores) {
            out.push_str(&format!("{layer_tag},{s},{v}\n"));
        }
        out.push_str(&format!("{layer_tag},mean,{}\n", self.mean));
        out.push_str(&format!("{layer_tag},std,{}\n", self.std));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

/// Clusters BMU grid coordinates `n_seeds` times and scores each clustering
/// against the class labels.
pub fn clustering_score_experiment(
    assignments: &[BmuAssignment],
    labels: &[u32],
    grid_units: usize,
    params: &KMeansParams,
) -> Result<VScoreReport> {
    if params.n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be >= 1"));
    }
    if params.k > grid_units {
        return Err(Error::invalid(format!(
            "k = {} exceeds the {grid_units} grid units",
            params.k
        )));
    }
    if labels.len() != assignments.len() {
        return Err(Error::invalid("one label per assignment is required"));
    }
    let points: Vec<Point> = assignments
        .iter()
        .map(|a| [a.row as f64, a.col as f64])
        .collect();
    let seeds: Vec<u64> = (0..params.n_seeds as u64)
        .map(|i| params.base_seed + i)
        .collect();
    let scores = seeds
        .par_iter()
        .map(|&s| {
            let r = kmeans(&points, params.k, s, params.max_iter, params.tol)?;
            let pred: Vec<u64> = r.assignments.iter().map(|&a| a as u64).collect();
            v_measure(labels, &pred)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VScoreReport::from_scores(seeds, scores))
}
