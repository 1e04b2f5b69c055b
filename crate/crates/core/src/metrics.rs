//! Bit accuracy, PSNR, RS-BPP capacity and evaluation sweeps.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::dataio::{derive_seed, random_message};
use crate::distortions::{realize, sample_channel, ChannelConfig, JpegMode};
use crate::error::{Error, Result};
use crate::msgcodec::BitMessage;
use crate::pipeline::{message_batch, Model};
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Fraction of positions where the two messages agree.
pub fn bpa(m_in: &BitMessage, m_out: &BitMessage) -> Result<f64> {
    if m_in.len() != m_out.len() {
        return Err(Error::shape(format!(
            "messages differ in length: {} vs {}",
            m_in.len(),
            m_out.len()
        )));
    }
    let same = m_in
        .bits()
        .iter()
        .zip(m_out.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / m_in.len() as f64)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1] (peak 1).
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape(y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Reed-Solomon bits-per-pixel capacity proxy `k (2p - 1)`.
pub fn rs_bpp(k: usize, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "accuracy {p} outside [0, 1]"
        )));
    }
    Ok(k as f64 * (2.0 * p - 1.0))
}

/// One distortion row of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub distortion: String,
    pub bpa_mean: f64,
    pub bpa_std: f64,
    pub psnr_mean: f64,
    pub rs_bpp: f64,
    pub images: usize,
    pub bits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub l: usize,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    /// Extra `key=value` pairs echoed for reproducibility.
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn row(&self, distortion: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.distortion == distortion)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k={} l={} seed={}", self.k, self.l, self.seed);
        let _ = writeln!(
            s,
            "{:<28} {:>8} {:>8} {:>9} {:>8} {:>7}",
            "distortion", "BPA(%)", "std", "PSNR(dB)", "RS-BPP", "images"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>8.2} {:>8.4} {:>9.2} {:>8.3} {:>7}",
                r.distortion,
                100.0 * r.bpa_mean,
                r.bpa_std,
                r.psnr_mean,
                r.rs_bpp,
                r.images
            );
        }
        s
    }

    /// Machine-readable form. Field names: `k`, `l`, `seed`, `config`, and per
    /// row `distortion`, `bpa_mean`, `bpa_std`, `psnr_mean`, `rs_bpp`,
    /// `images`, `bits`.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "k": self.k,
            "l": self.l,
            "seed": self.seed,
            "config": self.config.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "rows": self.rows.iter().map(|r| json!({
                "distortion": r.distortion,
                "bpa_mean": r.bpa_mean,
                "bpa_std": r.bpa_std,
                "psnr_mean": r.psnr_mean,
                "rs_bpp": r.rs_bpp,
                "images": r.images,
                "bits": r.bits,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Embeds a random message in every image, passes the encoded batch through
/// each channel (real JPEG) and scores recovery. Messages and masks are the
/// same for every row; channel randomness is seeded per row and batch.
pub fn evaluate(
    model: &Model<f32>,
    images: &[Tensor<f32>],
    channels: &[ChannelConfig],
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Dataset("evaluation needs at least one image".into()));
    }
    model.check()?;
    let k = model.net.k;
    let mut msg_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x006d_7367));
    let msgs: Vec<BitMessage> = (0..images.len())
        .map(|_| random_message(k, &mut msg_rng))
        .collect::<Result<_>>()?;
    let mut per_row: Vec<Vec<f64>> = vec![Vec::with_capacity(images.len()); channels.len()];
    let mut psnrs = Vec::with_capacity(images.len());
    for (b, (chunk, mchunk)) in images
        .chunks(batch_size.max(1))
        .zip(msgs.chunks(batch_size.max(1)))
        .enumerate()
    {
        let covers = Tensor::stack(chunk)?;
        let (encoded, _) = model.embed_batch(&covers, &message_batch(mchunk)?)?;
        for (i, cover) in chunk.iter().enumerate() {
            psnrs.push(psnr(cover, &encoded.batch_item(i))?);
        }
        for (r, ch) in channels.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, r as u64 + 1), b as u64));
            let spec = sample_channel(ch, &mut rng)?;
            let noised = realize(&spec, encoded.shape(), JpegMode::EvalReal, &mut rng)?
                .apply(&encoded, &covers)?;
            let out = model.extract_batch(&noised)?;
            for (i, m) in mchunk.iter().enumerate() {
                let got = BitMessage::binarize(&out.data()[i * k..(i + 1) * k])?;
                per_row[r].push(bpa(m, &got)?);
            }
        }
    }
    let psnr_mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let rows = channels
        .iter()
        .zip(per_row)
        .map(|(ch, accs)| {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            Ok(EvalRow {
                distortion: ch.to_string(),
                bpa_mean: mean,
                bpa_std: var.sqrt(),
                psnr_mean,
                rs_bpp: rs_bpp(k, mean.clamp(0.0, 1.0))?,
                images: accs.len(),
                bits: accs.len() * k,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        k,
        l: model.net.l,
        seed,
        rows,
        config: Vec::new(),
    })
}

/// The default grid: identity, each single distortion at its defaults, and combined.
pub fn default_channels() -> Vec<ChannelConfig> {
    let mut v = vec![ChannelConfig::identity()];
    v.extend(
        crate::distortions::DistortionSpec::combined_pool()
            .into_iter()
            .map(ChannelConfig::fixed),
    );
    v.push(ChannelConfig::combined());
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpa_examples() {
        let a = BitMessage::from_bit_str("10110").unwrap();
        let b = BitMessage::from_bit_str("10010").unwrap();
        assert_eq!(bpa(&a, &a).unwrap(), 1.0);
        assert_eq!(bpa(&a, &b).unwrap(), 0.8);
        assert_eq!(bpa(&a, &a.inverted()).unwrap(), 0.0);
        assert!(bpa(&a, &BitMessage::from_bit_str("1").unwrap()).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = Tensor::<f64>::full(vec![3, 4, 4], 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        assert!(psnr(&x, &Tensor::zeros(vec![3, 4, 5])).is_err());
    }

    #[test]
    fn rs_bpp_examples() {
        assert_eq!(rs_bpp(30, 0.5).unwrap(), 0.0);
        assert_eq!(rs_bpp(30, 1.0).unwrap(), 30.0);
        assert!((rs_bpp(30, 0.9996).unwrap() - 29.976).abs() < 1e-9);
        assert!(rs_bpp(30, 1.1).is_err());
        assert!(rs_bpp(30, -0.1).is_err());
    }

    #[test]
    fn default_grid_has_seven_rows() {
        let names: Vec<String> = default_channels().iter().map(ToString::to_string).collect();
        assert_eq!(names.len(), 7);
        assert_eq!(names[0], "identity");
        assert_eq!(names[6], "combined");
    }
}
