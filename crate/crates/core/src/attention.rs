//! Per-pixel embedding masks.
//!
//! The inverse gradient attention mask is `1 - g(|dL_MR/dI_co|)` with `g` a
//! normalization into `[0, 1]`: pixels whose perturbation barely moves the
//! message reconstruction loss receive weights near one. The Sobel mask is an
//! edge-magnitude alternative that needs no gradients.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::msgcodec::EncodedMessage;
use crate::tensor::{Real, Tensor};

/// Ranges narrower than this are treated as flat.
pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskSource {
    Iga,
    Sobel,
    Ones,
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSource::Iga => "iga",
            MaskSource::Sobel => "sobel",
            MaskSource::Ones => "ones",
        })
    }
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iga" => Ok(MaskSource::Iga),
            "sobel" => Ok(MaskSource::Sobel),
            "ones" | "none" => Ok(MaskSource::Ones),
            other => Err(Error::Config(format!("unknown mask source {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NormalizationKind {
    /// `(|g| - min) / (max - min + eps)` over the image.
    #[default]
    MinMax,
    /// Logistic of the signed gradient.
    Sigmoid,
}

impl fmt::Display for NormalizationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationKind::MinMax => "minmax",
            NormalizationKind::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for NormalizationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "minmax" | "min-max" => Ok(NormalizationKind::MinMax),
            "sigmoid" => Ok(NormalizationKind::Sigmoid),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

/// A mask with the same shape as the image it weights, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<T: Real = f32> {
    values: Tensor<T>,
    source: MaskSource,
}

impl<T: Real> AttentionMask<T> {
    pub fn ones(shape: &[usize]) -> Self {
        Self {
            values: Tensor::ones(shape.to_vec()),
            source: MaskSource::Ones,
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }
}

/// Builds the inverse gradient attention mask from `dL_MR/dI_co` of one image.
pub fn iga_mask<T: Real>(
    grad_image: &Tensor<T>,
    kind: NormalizationKind,
) -> Result<AttentionMask<T>> {
    if !grad_image.is_finite() {
        return Err(Error::DivergedGradients);
    }
    let values = match kind {
        NormalizationKind::MinMax => {
            let mag = grad_image.map(|g| g.abs());
            let (lo, hi) = (mag.min(), mag.max());
            let range = hi - lo;
            if range.f64() < DEGENERATE_RANGE {
                Tensor::ones(grad_image.shape().to_vec())
            } else {
                let denom = range + T::c(DEGENERATE_RANGE);
                mag.map(|a| (T::one() - (a - lo) / denom).max(T::zero()).min(T::one()))
            }
        }
        NormalizationKind::Sigmoid => grad_image.map(|g| T::one() - crate::diff::sigmoid(g)),
    };
    Ok(AttentionMask {
        values,
        source: MaskSource::Iga,
    })
}

/// Applies [`iga_mask`] to every item of a `[N, C, H, W]` gradient batch.
pub fn iga_mask_batch<T: Real>(grads: &Tensor<T>, kind: NormalizationKind) -> Result<Tensor<T>> {
    let items = (0..grads.shape()[0])
        .map(|i| iga_mask(&grads.batch_item(i), kind).map(AttentionMask::into_values))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Hadamard product `mask ⊙ cover`.
pub fn apply_attention<T: Real>(cover: &Tensor<T>, mask: &AttentionMask<T>) -> Result<Tensor<T>> {
    cover.zip_map(&mask.values, |c, a| c * a)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Per-channel Sobel gradient magnitude of a `[C, H, W]` image, min-max
/// normalized over the image. Borders replicate the edge pixels, so a flat
/// image has no response anywhere; a flat image maps to all zeros.
pub fn sobel_mask<T: Real>(cover: &Tensor<T>) -> Result<AttentionMask<T>> {
    let (c, h, w) = match *cover.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "sobel expects [C, H, W], got {:?}",
                cover.shape()
            )))
        }
    };
    if h < 3 || w < 3 {
        return Err(Error::shape(format!(
            "sobel needs at least 3x3 pixels, got {h}x{w}"
        )));
    }
    let src = cover.data();
    let mut mag = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let at = |y: isize, x: isize| -> f64 {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            plane[y * w + x].f64()
        };
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for (ky, row) in SOBEL_X.iter().enumerate() {
                    for (kx, &kv) in row.iter().enumerate() {
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        gx += kv * at(y as isize + dy, x as isize + dx);
                        // transpose of SOBEL_X
                        gy += SOBEL_X[kx][ky] * at(y as isize + dy, x as isize + dx);
                    }
                }
                mag[(ch * h + y) * w + x] = (gx * gx + gy * gy).sqrt();
            }
        }
    }
    let lo = mag.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if range < DEGENERATE_RANGE {
        vec![T::zero(); mag.len()]
    } else {
        mag.iter().map(|&m| T::c((m - lo) / range)).collect()
    };
    Ok(AttentionMask {
        values: Tensor::new(cover.shape().to_vec(), data)?,
        source: MaskSource::Sobel,
    })
}

/// Sobel masks for every item of a `[N, C, H, W]` batch.
pub fn sobel_mask_batch<T: Real>(covers: &Tensor<T>) -> Result<Tensor<T>> {
    let items = (0..covers.shape()[0])
        .map(|i| sobel_mask(&covers.batch_item(i)).map(AttentionMask::into_values))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Replicates each of the l encoded values over an `H x W` plane: `[l, H, W]`.
pub fn expand_message<T: Real>(m_en: &EncodedMessage, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(m_en.len() * h * w);
    for &v in &m_en.values {
        data.extend(std::iter::repeat_n(T::c(v), h * w));
    }
    Tensor::new(vec![m_en.len(), h, w], data)
}
