use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgd::{pgd_attack, PgdConfig};
use super::ttest::{welch_t_test, TTestResult};
use crate::error::{Error, Result};
use crate::hlr::hlr_vector;
use crate::image::Image;
use crate::refnet::{ProbeLayer, RefNet};
use crate::som::SomGrid;

/// Lattice metric used to compare clean and adversarial BMUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DisplacementMetric {
    /// The SOM's own metric (wrap-around for toroidal grids).
    #[default]
    Grid,
    /// Plain Euclidean distance between coordinates, ignoring wrap-around.
    Planar,
}

/// BMU displacement between clean and adversarial inputs for one probe layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementCurve {
    pub layer_tag: String,
    pub eps: Vec<f64>,
    /// `distances[e][i]`: displacement of image `i` at `eps[e]`.
    pub distances: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl DisplacementCurve {
    fn new(layer_tag: String, eps: Vec<f64>, distances: Vec<Vec<f64>>) -> Self {
        let (mean, stderr) = distances.iter().map(|d| mean_stderr(d)).unzip();
        DisplacementCurve {
            layer_tag,
            eps,
            distances,
            mean,
            stderr,
        }
    }

    pub fn distances_at(&self, eps: f64) -> Option<&[f64]> {
        self.eps
            .iter()
            .position(|&e| e == eps)
            .map(|i| self.distances[i].as_slice())
    }

    /// Welch t-test between the displacement samples at two budgets.
    pub fn compare(&self, eps_a: f64, eps_b: f64) -> Result<TTestResult> {
        let missing = |e: f64| Error::invalid(format!("eps {e} not in curve"));
        let a = self.distances_at(eps_a).ok_or_else(|| missing(eps_a))?;
        let b = self.distances_at(eps_b).ok_or_else(|| missing(eps_b))?;
        welch_t_test(a, b)
    }
}

fn mean_stderr(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    if d.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = d.iter().sum::<f64>() / n;
    if d.len() < 2 {
        return (mean, 0.0);
    }
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementReport {
    pub curves: Vec<DisplacementCurve>,
    /// Fraction of adversarial images the network misclassifies, per eps.
    pub misclassification: Vec<f64>,
}

/// Attacks every image at every budget in `eps_list`, maps clean and
/// adversarial inputs to their BMUs at each probe layer, and records the
/// lattice distance between the two BMUs.
///
/// Image `i` is attacked with seed `template.seed + i`. Targeted attacks use
/// the class after the true label as target.
pub fn displacement_experiment(
    net: &RefNet,
    soms: &[(ProbeLayer, &SomGrid)],
    images: &[Image],
    labels: &[u32],
    eps_list: &[f64],
    template: &PgdConfig,
    metric: DisplacementMetric,
) -> Result<DisplacementReport> {
    if images.len() != labels.len() {
        return Err(Error::invalid("one label per image is required"));
    }
    for (layer, som) in soms {
        if som.dim() != net.probe_dim(*layer) {
            return Err(Error::invalid(format!(
                "SOM for {} has dim {}, layer produces {}",
                layer.tag(),
                som.dim(),
                net.probe_dim(*layer)
            )));
        }
    }
    let n_classes = net.config().n_classes;

    // BMUs of the clean images are shared by every eps.
    let clean_bmus: Vec<Vec<(usize, usize)>> = images
        .par_iter()
        .map(|x| bmus_for(net, soms, x))
        .collect::<Result<_>>()?;

    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(eps_list.len()); soms.len()];
    let mut misclassification = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let rows = images
            .par_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (x, &label))| {
                let cfg = PgdConfig {
                    eps,
                    seed: template.seed.wrapping_add(i as u64),
                    ..template.clone()
                }
                .with_default_target(label as usize, n_classes);
                let adv = pgd_attack(net, x, label as usize, &cfg)?;
                let wrong = net.forward(&adv)?.predicted_class() != label as usize;
                let adv_bmus = bmus_for(net, soms, &adv)?;
                let dists = soms
                    .iter()
                    .zip(&clean_bmus[i])
                    .zip(&adv_bmus)
                    .map(|(((_, som), &c), &a)| match metric {
                        DisplacementMetric::Grid => som.grid_distance(c, a),
                        DisplacementMetric::Planar => {
                            let dr = c.0 as f64 - a.0 as f64;
                            let dc = c.1 as f64 - a.1 as f64;
                            Ok((dr * dr + dc * dc).sqrt())
                        }
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok((wrong, dists))
            })
            .collect::<Result<Vec<_>>>()?;
        let wrong = rows.iter().filter(|(w, _)| *w).count();
        misclassification.push(if rows.is_empty() {
            0.0
        } else {
            wrong as f64 / rows.len() as f64
        });
        for (l, col) in per_layer.iter_mut().enumerate() {
            col.push(rows.iter().map(|(_, d)| d[l]).collect());
        }
    }
    let curves = soms
        .iter()
        .zip(per_layer)
        .map(|((layer, _), d)| DisplacementCurve::new(layer.tag().to_owned(), eps_list.to_vec(), d))
        .collect();
    Ok(DisplacementReport {
        curves,
        misclassification,
    })
}

fn bmus_for(
    net: &RefNet,
    soms: &[(ProbeLayer, &SomGrid)],
    x: &Image,
) -> Result<Vec<(usize, usize)>> {
    let out = net.forward(x)?;
    soms.iter()
        .map(|(layer, som)| Ok(som.find_bmu(&hlr_vector(out.probe(*layer))?)?.coords()))
        .collect()
}

/// `layer_tag,eps,mean,stderr,n` rows.
pub fn curves_csv(curves: &[DisplacementCurve]) -> String {
    let mut out = String::from("layer_tag,eps,mean,stderr,n\n");
    for c in curves {
        for (i, e) in c.eps.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.layer_tag,
                e,
                c.mean[i],
                c.stderr[i],
                c.distances[i].len()
            ));
        }
    }
    out
}

/// `layer_tag,eps,pair,distance` rows, one per image pair.
pub fn raw_distances_csv(curves: &[DisplacementCurve]) -> String {
    let mut out = String::from("layer_tag,eps,pair,distance\n");
    for c in curves {
        for (e, d) in c.eps.iter().zip(&c.distances) {
            for (i, v) in d.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", c.layer_tag, e, i, v));
            }
        }
    }
    out
}

/// `layer_tag,eps_a,eps_b,t,p` rows.
pub fn ttest_csv(rows: &[(String, f64, f64, TTestResult)]) -> String {
    let mut out = String::from("layer_tag,eps_a,eps_b,t,p\n");
    for (tag, a, b, r) in rows {
        out.push_str(&format!("{tag},{a},{b},{},{}\n", r.t, r.p));
    }
    out
}
