//! Image files, datasets and random messages.
//!
//! Images are `[3, H, W]` tensors with values in [0, 1]. Writing quantizes to
//! 8 bits, so `embed -> write -> read -> extract` passes through an implicit
//! quantization distortion.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::msgcodec::BitMessage;
use crate::tensor::{Real, Tensor};

/// Converts a `[3, H, W]` tensor to an 8-bit image, clamping to [0, 1].
pub fn tensor_to_rgb8<T: Real>(t: &Tensor<T>) -> Result<RgbImage> {
    let (h, w) = match *t.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "expected [3, H, W], got {:?}",
                t.shape()
            )))
        }
    };
    let d = t.data();
    let q = |v: T| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

pub fn rgb8_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = T::c(f64::from(px[c]) / 255.0);
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Reads any supported raster file as an RGB tensor.
pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?
        .into_rgb8();
    Ok(rgb8_to_tensor(&img))
}

/// Reads an image and resizes it (bilinear) to `h x w` when needed.
pub fn read_image_resized<T: Real>(path: &Path, h: usize, w: usize) -> Result<(Tensor<T>, bool)> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?
        .into_rgb8();
    let resized = img.width() as usize != w || img.height() as usize != h;
    let img = if resized {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok((rgb8_to_tensor(&img), resized))
}

/// Writes a `[3, H, W]` tensor; the format follows the file extension.
pub fn write_image<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    tensor_to_rgb8(t)?.save(path)?;
    Ok(())
}

/// `k` independent fair bits.
pub fn random_message<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<BitMessage> {
    BitMessage::new((0..k).map(|_| u8::from(rng.random_bool(0.5))).collect())
}

/// Derives an independent stream seed from `base` and a tag (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Where and how to load images.
///
/// If `root` has `train/` and `val/` subdirectories they define the splits;
/// otherwise the files directly under `root` are shuffled by `seed` and the
/// last `val_fraction` of them form the validation split.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub limit: Option<usize>,
    pub seed: u64,
    pub val_fraction: f64,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: Split, height: usize, width: usize) -> Self {
        Self {
            root: root.into(),
            split,
            height,
            width,
            limit: None,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

/// Loaded images plus the files that could not be decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Loads one split. Unreadable files are skipped with a warning; a split
/// without any usable image is an error. Order is a seeded shuffle.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if !spec.root.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            spec.root.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (tr, va) = (spec.root.join("train"), spec.root.join("val"));
    let mut files = if tr.is_dir() && va.is_dir() {
        let mut f = list_files(if spec.split == Split::Train { &tr } else { &va })?;
        f.shuffle(&mut rng);
        f
    } else {
        let mut all = list_files(&spec.root)?;
        all.shuffle(&mut rng);
        let n_val = if all.len() < 2 {
            0
        } else {
            ((all.len() as f64 * spec.val_fraction).round() as usize).clamp(1, all.len() - 1)
        };
        let cut = all.len() - n_val;
        match spec.split {
            Split::Train => all.truncate(cut),
            Split::Val => {
                all.drain(..cut);
            }
        }
        all
    };
    if let Some(n) = spec.limit {
        files.truncate(n);
    }
    let mut ds = Dataset {
        images: Vec::new(),
        skipped: Vec::new(),
    };
    for path in files {
        match read_image_resized(&path, spec.height, spec.width) {
            Ok((t, _)) => ds.images.push(t),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                ds.skipped.push((path, e.to_string()));
            }
        }
    }
    if ds.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable images for the {:?} split under {}",
            spec.split,
            spec.root.display()
        )));
    }
    Ok(ds)
}

/// Procedural test images: smooth color gradients overlaid with random
/// rectangles, discs and fine texture. Deterministic per seed.
pub fn synthetic_images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            synthetic_image(h, w, &mut rng)
        })
        .collect()
}

fn synthetic_image<R: Rng>(h: usize, w: usize, rng: &mut R) -> Tensor<f32> {
    let mut img = vec![0f32; 3 * h * w];
    let base: [[f32; 3]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            for c in 0..3 {
                img[(c * h + y) * w + x] = base[0][c]
                    + (base[1][c] - base[0][c]) * u * 0.7
                    + (base[2][c] - base[0][c]) * v * 0.7;
            }
        }
    }
    for _ in 0..rng.random_range(2..6) {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (cy, cx) = (rng.random_range(0..h) as f32, rng.random_range(0..w) as f32);
        let (ry, rx) = (
            rng.random_range(h as f32 * 0.08..h as f32 * 0.4),
            rng.random_range(w as f32 * 0.08..w as f32 * 0.4),
        );
        let disc = rng.random_bool(0.5);
        let alpha = rng.random_range(0.5..1.0f32);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        let p = &mut img[(c * h + y) * w + x];
                        *p = (1.0 - alpha) * *p + alpha * col;
                    }
                }
            }
        }
    }
    let amp = rng.random_range(0.0..0.06f32);
    for p in &mut img {
        *p = (*p + rng.random_range(-amp..=amp)).clamp(0.0, 1.0);
    }
    Tensor::from_parts(vec![3, h, w], img)
}
