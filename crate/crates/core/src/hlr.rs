//! Hidden-layer representations: average-pooled, unit-normalized activation
//! vectors, and the `HLR1` exchange file shared with external extractors.
//!
//! File layout (little-endian): magic `HLR1`, u32 version (=1), u32 n_samples,
//! u32 dim, u8 has_labels, u8 tag_len, `tag_len` bytes of UTF-8 layer tag,
//! `n_samples · dim` f32 values row-major, then `n_samples` u32 labels when
//! `has_labels` is 1.

use std::fs;
use std::path::Path;

use log::warn;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HLR1";
const VERSION: u32 = 1;

/// Output of one probe layer for one input: `channels` feature maps of
/// `height × width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub label: Option<u32>,
}

impl ActivationTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "activation tensor contains non-finite values",
            ));
        }
        Ok(ActivationTensor {
            channels,
            height,
            width,
            values,
            label: None,
        })
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }
}

/// Replaces every feature map with its mean activation.
pub fn average_pool(t: &ActivationTensor) -> Result<Vec<f64>> {
    let hw = t.height * t.width;
    if t.channels == 0 || hw == 0 {
        return Err(Error::invalid(format!(
            "cannot pool an empty {}x{}x{} tensor",
            t.channels, t.height, t.width
        )));
    }
    if t.values.len() != t.channels * hw {
        return Err(Error::invalid(
            "tensor value count does not match its shape",
        ));
    }
    Ok(t.values
        .chunks_exact(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect())
}

/// Raised when an all-zero vector reaches [`normalize`]; the vector is kept
/// as zero rather than dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroVectorWarning;

/// Scales `v` to unit Euclidean length. The zero vector is returned unchanged
/// together with a warning.
pub fn normalize(v: &[f64]) -> (Vec<f64>, Option<ZeroVectorWarning>) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        warn!("zero activation vector kept as zero during normalization");
        return (v.to_vec(), Some(ZeroVectorWarning));
    }
    (v.iter().map(|x| x / norm).collect(), None)
}

/// Pooled and normalized representation of one tensor, at exchange precision.
pub fn hlr_vector(t: &ActivationTensor) -> Result<Vec<f32>> {
    let (v, _) = normalize(&average_pool(t)?);
    Ok(v.into_iter().map(|x| x as f32).collect())
}

/// A matrix of HLR vectors for one probe layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HlrDataset {
    dim: usize,
    vectors: Vec<f32>,
    labels: Option<Vec<u32>>,
    layer_tag: String,
}

impl HlrDataset {
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        labels: Option<Vec<u32>>,
        layer_tag: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("HLR dim must be >= 1"));
        }
        if !vectors.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values is not a whole number of {dim}-vectors",
                vectors.len()
            )));
        }
        let n = vectors.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::invalid(format!(
                    "{} labels for {n} samples",
                    l.len()
                )));
            }
        }
        let layer_tag = layer_tag.into();
        if layer_tag.len() > u8::MAX as usize {
            return Err(Error::invalid("layer tag longer than 255 bytes"));
        }
        Ok(HlrDataset {
            dim,
            vectors,
            labels,
            layer_tag,
        })
    }

    /// Pools and normalizes each tensor. Labels are kept only when every
    /// tensor carries one.
    pub fn from_tensors(
        tensors: &[ActivationTensor],
        layer_tag: impl Into<String>,
    ) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("no activation tensors given"))?;
        let dim = first.channels;
        let mut vectors = Vec::with_capacity(tensors.len() * dim);
        let mut zeros = 0usize;
        for t in tensors {
            if t.channels != dim {
                return Err(Error::invalid(format!(
                    "mixed channel counts {} and {}",
                    dim, t.channels
                )));
            }
            let (v, w) = normalize(&average_pool(t)?);
            zeros += w.is_some() as usize;
            vectors.extend(v.iter().map(|&x| x as f32));
        }
        if zeros > 0 {
            warn!(
                "{zeros} of {} samples pooled to the zero vector",
                tensors.len()
            );
        }
        let labels: Option<Vec<u32>> = tensors.iter().map(|t| t.label).collect();
        Self::new(dim, vectors, labels, layer_tag)
    }

    pub fn n_samples(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn layer_tag(&self) -> &str {
        &self.layer_tag
    }

    /// Samples that were all-zero before normalization.
    pub fn zero_vector_indices(&self) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| self.vector(i).iter().all(|&v| v == 0.0))
            .collect()
    }

    /// Indices of vectors whose norm is neither 1 ± `tol` nor exactly zero.
    pub fn off_sphere_indices(&self, tol: f64) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| {
                let norm = self
                    .vector(i)
                    .iter()
                    .map(|&v| (v as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                norm != 0.0 && (norm - 1.0).abs() > tol
            })
            .collect()
    }
}

pub fn encode_hlr(d: &HlrDataset) -> Result<Vec<u8>> {
    let n = u32::try_from(d.n_samples()).map_err(|_| Error::invalid("too many samples"))?;
    let dim = u32::try_from(d.dim).map_err(|_| Error::invalid("dim too large"))?;
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(n);
    w.u32(dim);
    w.u8(d.labels.is_some() as u8);
    w.u8(d.layer_tag.len() as u8);
    w.bytes(d.layer_tag.as_bytes());
    for &v in &d.vectors {
        w.f32(v);
    }
    if let Some(labels) = &d.labels {
        for &l in labels {
            w.u32(l);
        }
    }
    Ok(w.finish())
}

pub fn decode_hlr(bytes: &[u8]) -> Result<HlrDataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let n = r.u32("n_samples")? as usize;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::format("dim", "dim must be >= 1"));
    }
    let has_labels = match r.u8("has_labels")? {
        0 => false,
        1 => true,
        b => {
            return Err(Error::format(
                "has_labels",
                format!("expected 0 or 1, got {b}"),
            ))
        }
    };
    let tag_len = r.u8("tag_len")? as usize;
    let tag = std::str::from_utf8(r.take(tag_len, "layer_tag")?)
        .map_err(|e| Error::format("layer_tag", e.to_string()))?
        .to_owned();
    let count = n
        .checked_mul(dim)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::format("n_samples", "n_samples * dim overflows"))?;
    let vectors = r.f32_vec(count, "vectors")?;
    let labels = if has_labels {
        let raw = r.take(n * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        None
    };
    r.expect_end()?;
    Ok(HlrDataset {
        dim,
        vectors,
        labels,
        layer_tag: tag,
    })
}

pub fn write_hlr(d: &HlrDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_hlr(d)?)?;
    Ok(())
}

pub fn read_hlr(path: impl AsRef<Path>) -> Result<HlrDataset> {
    decode_hlr(&fs::read(path)?)
}
