use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hlr::ActivationTensor;
use crate::image::Image;

/// Architecture of the reference network: two `same`-padded convolutions,
/// each followed by ReLU and 2×2 average pooling, then a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefNetConfig {
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    /// Odd convolution kernel size.
    pub kernel: usize,
    pub n_classes: usize,
}

impl Default for RefNetConfig {
    fn default() -> Self {
        RefNetConfig {
            height: 16,
            width: 16,
            c1: 8,
            c2: 16,
            kernel: 3,
            n_classes: 8,
        }
    }
}

impl RefNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(4)
            || !self.width.is_multiple_of(4)
        {
            return Err(Error::invalid(format!(
                "image size {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if self.c1 == 0 || self.c2 == 0 || self.n_classes < 2 {
            return Err(Error::invalid(
                "channel counts must be >= 1 and n_classes >= 2",
            ));
        }
        Ok(())
    }

    fn k2(&self) -> usize {
        self.kernel * self.kernel
    }

    fn flat_features(&self) -> usize {
        self.c2 * (self.height / 4) * (self.width / 4)
    }

    fn offsets(&self) -> Offsets {
        let conv1_w = 0;
        let conv1_b = conv1_w + self.c1 * self.k2();
        let conv2_w = conv1_b + self.c1;
        let conv2_b = conv2_w + self.c2 * self.c1 * self.k2();
        let dense_w = conv2_b + self.c2;
        let dense_b = dense_w + self.n_classes * self.flat_features();
        let end = dense_b + self.n_classes;
        Offsets {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            dense_w,
            dense_b,
            end,
        }
    }

    pub fn n_params(&self) -> usize {
        self.offsets().end
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    dense_w: usize,
    dense_b: usize,
    end: usize,
}

/// Probe points exposed by [`RefNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProbeLayer {
    /// Pooled output of the first convolution block.
    L1,
    /// Pooled output of the second convolution block.
    L2,
}

impl ProbeLayer {
    pub const ALL: [ProbeLayer; 2] = [ProbeLayer::L1, ProbeLayer::L2];

    pub fn tag(self) -> &'static str {
        match self {
            ProbeLayer::L1 => "L1",
            ProbeLayer::L2 => "L2",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "L1" => Ok(ProbeLayer::L1),
            "L2" => Ok(ProbeLayer::L2),
            other => Err(Error::invalid(format!(
                "unknown layer tag `{other}`; valid tags are L1, L2"
            ))),
        }
    }
}

/// Objective whose input gradient [`RefNet::backward_input`] computes.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Softmax cross-entropy against `target`.
    CrossEntropy { target: usize },
    /// Cosine distance between the pooled probe activation and `code`.
    CosineToCode { layer: ProbeLayer, code: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub l1: ActivationTensor,
    pub l2: ActivationTensor,
}

impl ForwardOutput {
    pub fn probe(&self, layer: ProbeLayer) -> &ActivationTensor {
        match layer {
            ProbeLayer::L1 => &self.l1,
            ProbeLayer::L2 => &self.l2,
        }
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Intermediate activations kept for backpropagation.
struct Cache {
    z1: Vec<f64>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    p2: Vec<f64>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefNet {
    cfg: RefNetConfig,
    params: Vec<f64>,
}

impl RefNet {
    /// He-initialized network with zero biases.
    pub fn new(cfg: RefNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let o = cfg.offsets();
        let mut params = vec![0.0; o.end];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for p in &mut params[range] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(o.conv1_w..o.conv1_b, cfg.k2());
        fill(o.conv2_w..o.conv2_b, cfg.c1 * cfg.k2());
        fill(o.dense_w..o.dense_b, cfg.flat_features());
        Ok(RefNet { cfg, params })
    }

    pub fn zeros(cfg: RefNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RefNet {
            cfg,
            params: vec![0.0; cfg.n_params()],
        })
    }

    pub fn from_params(cfg: RefNetConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if params.len() != cfg.n_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                cfg.n_params(),
                params.len()
            )));
        }
        Ok(RefNet { cfg, params })
    }

    pub fn config(&self) -> &RefNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sets every conv bias to `value`. With a large negative value all ReLUs
    /// are inactive.
    pub fn set_conv_biases(&mut self, value: f64) {
        let o = self.cfg.offsets();
        self.params[o.conv1_b..o.conv2_w].fill(value);
        self.params[o.conv2_b..o.dense_w].fill(value);
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    pub fn probe_dim(&self, layer: ProbeLayer) -> usize {
        match layer {
            ProbeLayer::L1 => self.cfg.c1,
            ProbeLayer::L2 => self.cfg.c2,
        }
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if x.height != self.cfg.height || x.width != self.cfg.width {
            return Err(Error::invalid(format!(
                "image is {}x{}, network expects {}x{}",
                x.height, x.width, self.cfg.height, self.cfg.width
            )));
        }
        if x.pixels.len() != x.height * x.width || x.pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid(
                "image pixels must be finite and match its shape",
            ));
        }
        Ok(())
    }

    fn run(&self, x: &Image) -> Cache {
        let c = &self.cfg;
        let o = c.offsets();
        let (h, w) = (c.height, c.width);
        let p = &self.params;

        let z1 = conv_same(
            &x.pixels,
            1,
            h,
            w,
            &p[o.conv1_w..o.conv1_b],
            &p[o.conv1_b..o.conv2_w],
            c.c1,
            c.kernel,
        );
        let p1 = avg_pool2(&relu(&z1), c.c1, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let z2 = conv_same(
            &p1,
            c.c1,
            h2,
            w2,
            &p[o.conv2_w..o.conv2_b],
            &p[o.conv2_b..o.dense_w],
            c.c2,
            c.kernel,
        );
        let p2 = avg_pool2(&relu(&z2), c.c2, h2, w2);
        let nf = c.flat_features();
        let dw = &p[o.dense_w..o.dense_b];
        let logits = (0..c.n_classes)
            .map(|j| {
                p[o.dense_b + j]
                    + dw[j * nf..(j + 1) * nf]
                        .iter()
                        .zip(&p2)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        Cache {
            z1,
            p1,
            z2,
            p2,
            logits,
        }
    }

    /// Logits and both probe tensors for one image.
    pub fn forward(&self, x: &Image) -> Result<ForwardOutput> {
        self.check_image(x)?;
        let c = &self.cfg;
        let cache = self.run(x);
        let l1 = ActivationTensor::new(c.c1, c.height / 2, c.width / 2, cache.p1)?;
        let l2 = ActivationTensor::new(c.c2, c.height / 4, c.width / 4, cache.p2)?;
        Ok(ForwardOutput {
            logits: cache.logits,
            l1,
            l2,
        })
    }

    /// Loss value and its gradient with respect to the input pixels.
    pub fn backward_input(&self, x: &Image, loss: &LossSpec) -> Result<(f64, Image)> {
        self.check_image(x)?;
        self.check_loss(loss)?;
        let cache = self.run(x);
        let (value, seed) = self.loss_seed(&cache, loss)?;
        let (dx, _) = self.backprop(x, &cache, seed, false);
        Ok((value, Image::new(x.height, x.width, dx)?))
    }

    /// Cross-entropy loss and its gradient with respect to every parameter.
    pub(crate) fn backward_params(&self, x: &Image, target: usize) -> Result<(f64, Vec<f64>)> {
        let loss = LossSpec::CrossEntropy { target };
        self.check_image(x)?;
        self.check_loss(&loss)?;
        let cache = self.run(x);
        let (value, seed) = self.loss_seed(&cache, &loss)?;
        let (_, grads) = self.backprop(x, &cache, seed, true);
        Ok((value, grads.expect("parameter gradients requested")))
    }

    /// Loss value without gradients.
    pub fn loss(&self, x: &Image, loss: &LossSpec) -> Result<f64> {
        self.check_image(x)?;
        self.check_loss(loss)?;
        let cache = self.run(x);
        Ok(self.loss_seed(&cache, loss)?.0)
    }

    fn check_loss(&self, loss: &LossSpec) -> Result<()> {
        match loss {
            LossSpec::CrossEntropy { target } if *target >= self.cfg.n_classes => {
                Err(Error::invalid(format!(
                    "target class {target} outside 0..{}",
                    self.cfg.n_classes
                )))
            }
            LossSpec::CosineToCode { layer, code } if code.len() != self.probe_dim(*layer) => {
                Err(Error::invalid(format!(
                    "code has length {}, layer {} has {} channels",
                    code.len(),
                    layer.tag(),
                    self.probe_dim(*layer)
                )))
            }
            _ => Ok(()),
        }
    }

    fn loss_seed(&self, cache: &Cache, loss: &LossSpec) -> Result<(f64, Seed)> {
        match loss {
            LossSpec::CrossEntropy { target } => {
                let probs = softmax(&cache.logits);
                let value = -probs[*target].max(f64::MIN_POSITIVE).ln();
                let mut g = probs;
                g[*target] -= 1.0;
                Ok((value, Seed::Logits(g)))
            }
            LossSpec::CosineToCode { layer, code } => {
                let c = &self.cfg;
                let (probe, channels, hw) = match layer {
                    ProbeLayer::L1 => (&cache.p1, c.c1, c.height * c.width / 4),
                    ProbeLayer::L2 => (&cache.p2, c.c2, c.height * c.width / 16),
                };
                let pooled: Vec<f64> = probe
                    .chunks_exact(hw)
                    .map(|ch| ch.iter().sum::<f64>() / hw as f64)
                    .collect();
                let (value, dpool) = cosine_distance_grad(&pooled, code)?;
                let mut g = vec![0.0; channels * hw];
                for (ch, d) in g.chunks_exact_mut(hw).zip(&dpool) {
                    ch.fill(d / hw as f64);
                }
                Ok((
                    value,
                    match layer {
                        ProbeLayer::L1 => Seed::P1(g),
                        ProbeLayer::L2 => Seed::P2(g),
                    },
                ))
            }
        }
    }

    fn backprop(
        &self,
        x: &Image,
        cache: &Cache,
        seed: Seed,
        want_params: bool,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let c = &self.cfg;
        let o = c.offsets();
        let p = &self.params;
        let (h, w) = (c.height, c.width);
        let (h2, w2) = (h / 2, w / 2);
        let nf = c.flat_features();
        let mut grads = want_params.then(|| vec![0.0; o.end]);

        let (mut dp2, mut dp1) = (vec![0.0; nf], vec![0.0; cache.p1.len()]);
        match seed {
            Seed::Logits(g) => {
                let dw = &p[o.dense_w..o.dense_b];
                for (j, &gj) in g.iter().enumerate() {
                    let row = &dw[j * nf..(j + 1) * nf];
                    for (d, &wv) in dp2.iter_mut().zip(row) {
                        *d += gj * wv;
                    }
                }
                if let Some(gr) = grads.as_mut() {
                    for (j, &gj) in g.iter().enumerate() {
                        let row = &mut gr[o.dense_w + j * nf..o.dense_w + (j + 1) * nf];
                        for (d, &a) in row.iter_mut().zip(&cache.p2) {
                            *d = gj * a;
                        }
                        gr[o.dense_b + j] = gj;
                    }
                }
            }
            Seed::P2(g) => dp2 = g,
            Seed::P1(g) => dp1 = g,
        }

        if dp2.iter().any(|&v| v != 0.0) {
            let mut dz2 = avg_pool2_backward(&dp2, c.c2, h2, w2);
            relu_backward(&mut dz2, &cache.z2);
            let (dw2, db2) = grads.as_mut().map_or((None, None), |gr| {
                let (a, b) = gr[o.conv2_w..o.dense_w].split_at_mut(c.c2 * c.c1 * c.k2());
                (Some(a), Some(b))
            });
            let dp1_from2 = conv_same_backward(
                &dz2,
                &cache.p1,
                c.c1,
                h2,
                w2,
                &p[o.conv2_w..o.conv2_b],
                c.c2,
                c.kernel,
                true,
                dw2,
                db2,
            );
            for (d, v) in dp1.iter_mut().zip(dp1_from2.unwrap()) {
                *d += v;
            }
        }

        let mut dz1 = avg_pool2_backward(&dp1, c.c1, h, w);
        relu_backward(&mut dz1, &cache.z1);
        let (dw1, db1) = grads.as_mut().map_or((None, None), |gr| {
            let (a, b) = gr[o.conv1_w..o.conv2_w].split_at_mut(c.c1 * c.k2());
            (Some(a), Some(b))
        });
        let dx = conv_same_backward(
            &dz1,
            &x.pixels,
            1,
            h,
            w,
            &p[o.conv1_w..o.conv1_b],
            c.c1,
            c.kernel,
            true,
            dw1,
            db1,
        )
        .unwrap();
        (dx, grads)
    }
}

enum Seed {
    Logits(Vec<f64>),
    P1(Vec<f64>),
    P2(Vec<f64>),
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `1 − cos(a, b)` and its gradient with respect to `a`.
fn cosine_distance_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid(
            "cosine distance is undefined for a zero vector (probe activations are all zero)",
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| -(bi / (na * nb) - cos * ai / (na * na)))
        .collect();
    Ok((1.0 - cos, grad))
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

/// Zeroes gradient entries whose pre-activation is not strictly positive.
fn relu_backward(grad: &mut [f64], z: &[f64]) {
    for (g, &zv) in grad.iter_mut().zip(z) {
        if zv <= 0.0 {
            *g = 0.0;
        }
    }
}

fn avg_pool2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                out[c * oh * ow + i * ow + j] = 0.25 * s;
            }
        }
    }
    out
}

/// `h`, `w` are the pre-pooling extents.
fn avg_pool2_backward(dout: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut din = vec![0.0; channels * h * w];
    for c in 0..channels {
        for i in 0..h {
            for j in 0..w {
                din[c * h * w + i * w + j] = 0.25 * dout[c * oh * ow + (i / 2) * ow + j / 2];
            }
        }
    }
    din
}

/// Zero-padded convolution (cross-correlation) preserving spatial size.
#[allow(clippy::too_many_arguments)]
fn conv_same(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let kern = &weights[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ki in 0..k {
                let di = ki as isize - r;
                for kj in 0..k {
                    let dj = kj as isize - r;
                    let wv = kern[ki * k + kj];
                    for i in 0..h {
                        let si = i as isize + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src_row = &src[si as usize * w..(si as usize + 1) * w];
                        let out_row = &mut plane[i * w..(i + 1) * w];
                        let j0 = (-dj).max(0) as usize;
                        let j1 = (w as isize - dj).min(w as isize) as usize;
                        for j in j0..j1 {
                            out_row[j] += wv * src_row[(j as isize + dj) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv_same`]. Accumulates weight and bias gradients when
/// buffers are given and returns the input gradient when `want_input`.
#[allow(clippy::too_many_arguments)]
fn conv_same_backward(
    dout: &[f64],
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    k: usize,
    want_input: bool,
    mut dweights: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) -> Option<Vec<f64>> {
    let r = (k / 2) as isize;
    let mut din = want_input.then(|| vec![0.0; cin * h * w]);
    for co in 0..cout {
        let g = &dout[co * h * w..(co + 1) * h * w];
        if let Some(db) = dbias.as_deref_mut() {
            db[co] += g.iter().sum::<f64>();
        }
        for ci in 0..cin {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let base = (co * cin + ci) * k * k;
            for ki in 0..k {
                let di = ki as isize - r;
                for kj in 0..k {
                    let dj = kj as isize - r;
                    let wv = weights[base + ki * k + kj];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i as isize + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let si = si as usize;
                        let j0 = (-dj).max(0) as usize;
                        let j1 = (w as isize - dj).min(w as isize) as usize;
                        for j in j0..j1 {
                            let sj = (j as isize + dj) as usize;
                            let gv = g[i * w + j];
                            acc += gv * src[si * w + sj];
                            if let Some(d) = din.as_mut() {
                                d[ci * h * w + si * w + sj] += gv * wv;
                            }
                        }
                    }
                    if let Some(dw) = dweights.as_deref_mut() {
                        dw[base + ki * k + kj] += acc;
                    }
                }
            }
        }
    }
    din
}
