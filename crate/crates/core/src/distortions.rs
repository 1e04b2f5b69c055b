//! The noise channel between encoder and decoder.
//!
//! Every distortion keeps the `[N, C, H, W]` shape: crop zero-pads back at the
//! original location, resize scales down and back up, JPEG works blockwise.
//! Training uses differentiable forms (fixed random masks, linear resampling
//! operators, DCT coefficient masking); evaluation swaps JPEG for a real codec.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CROP: f64 = 0.3;
pub const DEFAULT_CROPOUT: f64 = 0.3;
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const DEFAULT_ZOOM: f64 = 0.7;
pub const DEFAULT_QUALITY: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistortionKind {
    Identity,
    Crop,
    Cropout,
    Dropout,
    Resize,
    Jpeg,
}

/// A named distortion with its parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistortionSpec {
    Identity,
    /// Keep a random square holding fraction `p` of the pixels.
    Crop {
        p: f64,
    },
    /// A random square of area fraction `p` keeps encoded pixels, the rest is cover.
    Cropout {
        p: f64,
    },
    /// Each pixel is encoded with probability `p`, cover otherwise.
    Dropout {
        p: f64,
    },
    /// Bilinear down-scale by `z`, then back up.
    Resize {
        z: f64,
    },
    /// JPEG at quality `q`.
    Jpeg {
        q: f64,
    },
}

impl DistortionSpec {
    pub fn kind(&self) -> DistortionKind {
        match self {
            DistortionSpec::Identity => DistortionKind::Identity,
            DistortionSpec::Crop { .. } => DistortionKind::Crop,
            DistortionSpec::Cropout { .. } => DistortionKind::Cropout,
            DistortionSpec::Dropout { .. } => DistortionKind::Dropout,
            DistortionSpec::Resize { .. } => DistortionKind::Resize,
            DistortionSpec::Jpeg { .. } => DistortionKind::Jpeg,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistortionSpec::Identity => "identity",
            DistortionSpec::Crop { .. } => "crop",
            DistortionSpec::Cropout { .. } => "cropout",
            DistortionSpec::Dropout { .. } => "dropout",
            DistortionSpec::Resize { .. } => "resize",
            DistortionSpec::Jpeg { .. } => "jpeg",
        }
    }

    /// The five distortions of the combined pool with default parameters.
    pub fn combined_pool() -> Vec<DistortionSpec> {
        vec![
            DistortionSpec::Crop { p: DEFAULT_CROP },
            DistortionSpec::Cropout { p: DEFAULT_CROPOUT },
            DistortionSpec::Dropout { p: DEFAULT_DROPOUT },
            DistortionSpec::Resize { z: DEFAULT_ZOOM },
            DistortionSpec::Jpeg { q: DEFAULT_QUALITY },
        ]
    }

    /// Checks parameter ranges: crop ratio, zoom in (0, 1); mixing ratios in
    /// [0, 1]; quality in (0, 100].
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidParameter(format!(
                "{} {what}={v} out of range",
                self.name()
            )))
        };
        match *self {
            DistortionSpec::Identity => Ok(()),
            DistortionSpec::Crop { p } if !(p > 0.0 && p < 1.0) => bad("p", p),
            DistortionSpec::Cropout { p } | DistortionSpec::Dropout { p }
                if !(0.0..=1.0).contains(&p) =>
            {
                bad("p", p)
            }
            DistortionSpec::Resize { z } if !(z > 0.0 && z < 1.0) => bad("z", z),
            DistortionSpec::Jpeg { q } if !(q > 0.0 && q <= 100.0) => bad("q", q),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DistortionSpec::Identity => write!(f, "identity"),
            DistortionSpec::Crop { p } => write!(f, "crop:p={p}"),
            DistortionSpec::Cropout { p } => write!(f, "cropout:p={p}"),
            DistortionSpec::Dropout { p } => write!(f, "dropout:p={p}"),
            DistortionSpec::Resize { z } => write!(f, "resize:z={z}"),
            DistortionSpec::Jpeg { q } => write!(f, "jpeg:q={q}"),
        }
    }
}

impl FromStr for DistortionSpec {
    type Err = Error;

    /// Parses `name` or `name:key=value`, e.g. `jpeg:q=50`, `crop:p=0.3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let value = |key: &str, default: f64| -> Result<f64> {
            match arg {
                None => Ok(default),
                Some(a) => {
                    let (k, v) = a
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("expected {key}=<value> in {s:?}")))?;
                    if k.trim() != key {
                        return Err(Error::Config(format!("unknown parameter {k:?} for {name}")));
                    }
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad number {v:?} in {s:?}")))
                }
            }
        };
        let spec = match name {
            "identity" => DistortionSpec::Identity,
            "crop" => DistortionSpec::Crop {
                p: value("p", DEFAULT_CROP)?,
            },
            "cropout" => DistortionSpec::Cropout {
                p: value("p", DEFAULT_CROPOUT)?,
            },
            "dropout" => DistortionSpec::Dropout {
                p: value("p", DEFAULT_DROPOUT)?,
            },
            "resize" => DistortionSpec::Resize {
                z: value("z", DEFAULT_ZOOM)?,
            },
            "jpeg" => DistortionSpec::Jpeg {
                q: value("q", DEFAULT_QUALITY)?,
            },
            other => return Err(Error::Config(format!("unknown distortion {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JpegMode {
    /// Differentiable DCT coefficient masking.
    TrainApprox,
    /// A real baseline JPEG round trip (not differentiable).
    EvalReal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Fixed,
    Combined,
}

/// Which distortions the channel draws from.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub specs: Vec<DistortionSpec>,
    pub mode: SamplingMode,
}

impl ChannelConfig {
    pub fn fixed(spec: DistortionSpec) -> Self {
        Self {
            specs: vec![spec],
            mode: SamplingMode::Fixed,
        }
    }

    pub fn identity() -> Self {
        Self::fixed(DistortionSpec::Identity)
    }

    pub fn combined() -> Self {
        Self {
            specs: DistortionSpec::combined_pool(),
            mode: SamplingMode::Combined,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.specs.len()) {
            (_, 0) => Err(Error::Config("channel has no distortions".into())),
            (SamplingMode::Combined, 1) => Err(Error::Config(
                "combined sampling needs at least two distortions".into(),
            )),
            (SamplingMode::Fixed, n) if n > 1 => Err(Error::Config(
                "fixed sampling takes exactly one distortion".into(),
            )),
            _ => self.specs.iter().try_for_each(DistortionSpec::validate),
        }
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            SamplingMode::Fixed => write!(f, "{}", self.specs[0]),
            SamplingMode::Combined if self.specs == DistortionSpec::combined_pool() => {
                write!(f, "combined")
            }
            SamplingMode::Combined => {
                let parts: Vec<String> = self.specs.iter().map(ToString::to_string).collect();
                write!(f, "combined({})", parts.join(","))
            }
        }
    }
}

impl FromStr for ChannelConfig {
    type Err = Error;

    /// `combined`, `combined(crop:p=0.3,jpeg:q=50)`, or a single distortion.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let cfg = if t == "combined" {
            ChannelConfig::combined()
        } else if let Some(inner) = t
            .strip_prefix("combined(")
            .and_then(|r| r.strip_suffix(')'))
        {
            ChannelConfig {
                specs: inner
                    .split(',')
                    .map(str::parse)
                    .collect::<Result<Vec<_>>>()?,
                mode: SamplingMode::Combined,
            }
        } else {
            ChannelConfig::fixed(t.parse()?)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Draws the distortion for one mini-batch.
pub fn sample_channel<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> Result<DistortionSpec> {
    cfg.validate()?;
    Ok(match cfg.mode {
        SamplingMode::Fixed => cfg.specs[0],
        SamplingMode::Combined => cfg.specs[rng.random_range(0..cfg.specs.len())],
    })
}

/// A distortion with all randomness drawn, ready to apply to a batch.
#[derive(Clone, Debug)]
pub enum Realized<T: Real> {
    Identity,
    /// Multiply by a 0/1 mask (crop).
    Mask(Tensor<T>),
    /// `mask * encoded + (1 - mask) * cover` (cropout, dropout).
    Mix(Tensor<T>),
    /// `A X B^T` per plane (resize).
    Linear {
        rows: Tensor<T>,
        cols: Tensor<T>,
    },
    /// Blockwise DCT coefficient mask, then clamp to [0, 1].
    DctMask(Box<[T; 64]>),
    /// Real JPEG round trip.
    Jpeg {
        quality: u8,
    },
}

fn batch_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!(
            "expected [N, C, H, W], got {shape:?}"
        ))),
    }
}

/// Side lengths of the square that keeps area fraction `p`.
pub fn crop_side(p: f64, h: usize, w: usize) -> (usize, usize) {
    let s = p.sqrt();
    (
        (s * h as f64).floor() as usize,
        (s * w as f64).floor() as usize,
    )
}

fn square_masks<T: Real, R: Rng + ?Sized>(
    (n, c, h, w): (usize, usize, usize, usize),
    p: f64,
    rng: &mut R,
) -> Tensor<T> {
    let (sh, sw) = crop_side(p, h, w);
    let mut data = vec![T::zero(); n * c * h * w];
    for item in data.chunks_mut(c * h * w) {
        let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
        if sh == 0 || sw == 0 {
            continue;
        }
        let top = r.random_range(0..=h - sh);
        let left = r.random_range(0..=w - sw);
        for plane in item.chunks_mut(h * w) {
            for y in top..top + sh {
                plane[y * w + left..y * w + left + sw].fill(T::one());
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], data)
}

fn bernoulli_masks<T: Real, R: Rng + ?Sized>(
    (n, c, h, w): (usize, usize, usize, usize),
    p: f64,
    rng: &mut R,
) -> Tensor<T> {
    let mut data = vec![T::zero(); n * c * h * w];
    for item in data.chunks_mut(c * h * w) {
        let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let keep: Vec<bool> = (0..h * w).map(|_| r.random_bool(p)).collect();
        for plane in item.chunks_mut(h * w) {
            for (v, &k) in plane.iter_mut().zip(&keep) {
                if k {
                    *v = T::one();
                }
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], data)
}

/// Bilinear resampling matrix `[m, n]` (half-pixel centers, edge clamped).
/// Rows sum to one, so constants are preserved.
pub fn bilinear_matrix<T: Real>(m: usize, n: usize) -> Tensor<T> {
    let mut a = vec![T::zero(); m * n];
    let scale = n as f64 / m as f64;
    for i in 0..m {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        a[i * n + i0] = a[i * n + i0] + T::c(1.0 - frac);
        a[i * n + i1] = a[i * n + i1] + T::c(frac);
    }
    Tensor::from_parts(vec![m, n], a)
}

/// Down-then-up resampling operators for zoom `z` on an `h x w` image.
pub fn resize_operators<T: Real>(z: f64, h: usize, w: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let hs = (z * h as f64).round() as usize;
    let ws = (z * w as f64).round() as usize;
    if hs < 1 || ws < 1 {
        return Err(Error::InvalidParameter(format!(
            "zoom {z} shrinks {h}x{w} below one pixel"
        )));
    }
    let compose = |full: usize, small: usize| -> Tensor<T> {
        let down = bilinear_matrix::<T>(small, full);
        let up = bilinear_matrix::<T>(full, small);
        let mut out = vec![T::zero(); full * full];
        crate::tensor::gemm(
            full,
            small,
            full,
            up.data(),
            false,
            down.data(),
            false,
            &mut out,
            false,
        );
        Tensor::from_parts(vec![full, full], out)
    };
    Ok((compose(h, hs), compose(w, ws)))
}

/// The 64 (row, col) positions of an 8x8 block in JPEG zig-zag order.
pub fn zigzag_order() -> [(usize, usize); 64] {
    let mut order = [(0, 0); 64];
    let mut idx = 0;
    for s in 0..15usize {
        let lo = s.saturating_sub(7);
        let hi = s.min(7);
        if s % 2 == 0 {
            for r in (lo..=hi).rev() {
                order[idx] = (r, s - r);
                idx += 1;
            }
        } else {
            for r in lo..=hi {
                order[idx] = (r, s - r);
                idx += 1;
            }
        }
    }
    order
}

/// Number of zig-zag coefficients kept by the differentiable JPEG at quality `q`.
pub fn jpeg_keep_count(q: f64) -> usize {
    ((64.0 * (q / 100.0).powi(2)).round() as usize).clamp(1, 64)
}

/// Row-major 8x8 keep mask holding the first `keep` zig-zag coefficients.
pub fn zigzag_mask<T: Real>(keep: usize) -> [T; 64] {
    let mut m = [T::zero(); 64];
    for &(r, c) in zigzag_order().iter().take(keep.min(64)) {
        m[r * 8 + c] = T::one();
    }
    m
}

/// Draws the randomness of `spec` for a batch of the given shape.
pub fn realize<T: Real, R: Rng + ?Sized>(
    spec: &DistortionSpec,
    shape: &[usize],
    jpeg_mode: JpegMode,
    rng: &mut R,
) -> Result<Realized<T>> {
    spec.validate()?;
    let dims = batch_dims(shape)?;
    let (_, _, h, w) = dims;
    Ok(match *spec {
        DistortionSpec::Identity => Realized::Identity,
        DistortionSpec::Crop { p } => {
            let (sh, sw) = crop_side(p, h, w);
            if sh == 0 || sw == 0 {
                return Err(Error::InvalidParameter(format!(
                    "crop p={p} keeps no pixels of {h}x{w}"
                )));
            }
            Realized::Mask(square_masks(dims, p, rng))
        }
        DistortionSpec::Cropout { p } => Realized::Mix(square_masks(dims, p, rng)),
        DistortionSpec::Dropout { p } => Realized::Mix(bernoulli_masks(dims, p, rng)),
        DistortionSpec::Resize { z } => {
            let (rows, cols) = resize_operators(z, h, w)?;
            Realized::Linear { rows, cols }
        }
        DistortionSpec::Jpeg { q } => {
            if h % 8 != 0 || w % 8 != 0 {
                return Err(Error::shape(format!(
                    "jpeg needs dims divisible by 8, got {h}x{w}"
                )));
            }
            match jpeg_mode {
                JpegMode::TrainApprox => {
                    Realized::DctMask(Box::new(zigzag_mask(jpeg_keep_count(q))))
                }
                JpegMode::EvalReal => Realized::Jpeg {
                    quality: q.round().clamp(1.0, 100.0) as u8,
                },
            }
        }
    })
}

impl<T: Real> Realized<T> {
    /// Applies the distortion on a tape. `cover` is needed for the mixing kinds.
    pub fn apply_var(&self, encoded: &Var<T>, cover: &Var<T>) -> Result<Var<T>> {
        let tape = encoded.tape();
        match self {
            Realized::Identity => Ok(encoded.clone()),
            Realized::Mask(m) => encoded.mul(&tape.constant(m.clone())),
            Realized::Mix(m) => {
                let keep = tape.constant(m.clone());
                let rest = tape.constant(m.map(|v| T::one() - v));
                encoded.mul(&keep)?.add(&cover.mul(&rest)?)
            }
            Realized::Linear { rows, cols } => encoded.plane_linear(rows, cols),
            Realized::DctMask(keep) => Ok(encoded.dct8_mask(keep)?.clamp(T::zero(), T::one())),
            Realized::Jpeg { quality } => {
                Ok(tape.constant(jpeg_roundtrip(encoded.value(), *quality)?))
            }
        }
    }

    /// Applies the distortion to plain tensors.
    pub fn apply(&self, encoded: &Tensor<T>, cover: &Tensor<T>) -> Result<Tensor<T>> {
        if let Realized::Jpeg { quality } = self {
            return jpeg_roundtrip(encoded, *quality);
        }
        let tape = Tape::new();
        let out = self.apply_var(
            &tape.constant(encoded.clone()),
            &tape.constant(cover.clone()),
        )?;
        Ok(out.value().clone())
    }
}

/// Encodes every image of a `[N, 3, H, W]` batch as JPEG at `quality` and decodes it.
pub fn jpeg_roundtrip<T: Real>(batch: &Tensor<T>, quality: u8) -> Result<Tensor<T>> {
    let (n, c, h, w) = batch_dims(batch.shape())?;
    if c != 3 {
        return Err(Error::shape(format!(
            "jpeg round trip needs 3 channels, got {c}"
        )));
    }
    let mut out = Vec::with_capacity(batch.numel());
    for i in 0..n {
        let img = crate::dataio::tensor_to_rgb8(&batch.batch_item(i))?;
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&img)?;
        let decoded: RgbImage =
            image::load(Cursor::new(buf), ImageFormat::Jpeg).map(DynamicImage::into_rgb8)?;
        let t: Tensor<T> = crate::dataio::rgb8_to_tensor(&decoded);
        debug_assert_eq!(t.shape(), &[3, h, w]);
        out.extend_from_slice(t.data());
    }
    Tensor::new(vec![n, c, h, w], out)
}

fn with_batch<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.clone().reshape(s)?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => Err(Error::shape(format!(
            "expected an image or batch, got {:?}",
            x.shape()
        ))),
    }
}

fn apply_spec<T: Real, R: Rng + ?Sized>(
    spec: DistortionSpec,
    i_en: &Tensor<T>,
    i_co: Option<&Tensor<T>>,
    mode: JpegMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (en, single) = with_batch(i_en)?;
    let co = match i_co {
        Some(c) => {
            i_en.expect_same_shape(c)?;
            with_batch(c)?.0
        }
        None => en.clone(),
    };
    let out = realize(&spec, en.shape(), mode, rng)?.apply(&en, &co)?;
    if single {
        out.reshape(i_en.shape().to_vec())
    } else {
        Ok(out)
    }
}

pub fn identity<T: Real>(i_en: &Tensor<T>) -> Tensor<T> {
    i_en.clone()
}

pub fn crop<T: Real, R: Rng + ?Sized>(i_en: &Tensor<T>, p: f64, rng: &mut R) -> Result<Tensor<T>> {
    apply_spec(
        DistortionSpec::Crop { p },
        i_en,
        None,
        JpegMode::TrainApprox,
        rng,
    )
}

pub fn cropout<T: Real, R: Rng + ?Sized>(
    i_en: &Tensor<T>,
    i_co: &Tensor<T>,
    p_c: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    apply_spec(
        DistortionSpec::Cropout { p: p_c },
        i_en,
        Some(i_co),
        JpegMode::TrainApprox,
        rng,
    )
}

pub fn dropout<T: Real, R: Rng + ?Sized>(
    i_en: &Tensor<T>,
    i_co: &Tensor<T>,
    p_d: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    apply_spec(
        DistortionSpec::Dropout { p: p_d },
        i_en,
        Some(i_co),
        JpegMode::TrainApprox,
        rng,
    )
}

pub fn resize<T: Real>(i_en: &Tensor<T>, z: f64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    apply_spec(
        DistortionSpec::Resize { z },
        i_en,
        None,
        JpegMode::TrainApprox,
        &mut rng,
    )
}

pub fn jpeg<T: Real>(i_en: &Tensor<T>, q: f64, mode: JpegMode) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    apply_spec(DistortionSpec::Jpeg { q }, i_en, None, mode, &mut rng)
}
