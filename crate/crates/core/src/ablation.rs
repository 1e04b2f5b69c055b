//! Shared-seed training sweeps over model variants.
//!
//! Every entry is trained from the same base configuration and seed, so the
//! data order and message streams are identical across entries; only the
//! model options differ.

use std::fmt::Write as _;

use serde_json::json;

use crate::attention::MaskSource;
use crate::config::RunConfig;
use crate::distortions::ChannelConfig;
use crate::error::Result;
use crate::metrics::evaluate;
use crate::pipeline::{ModelOptions, Variant};
use crate::tensor::Tensor;
use crate::train::{fit, EpochRecord, FitOptions, TrainState};

/// Label printed for the Sobel-mask comparison model.
pub const SOBEL_LABEL: &str = "Model-S";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub label: String,
    pub options: ModelOptions,
}

impl AblationEntry {
    pub fn variant(v: Variant, base: ModelOptions) -> Self {
        Self {
            label: v.to_string(),
            options: ModelOptions {
                norm: base.norm,
                ..ModelOptions::variant(v)
            },
        }
    }

    /// The full model with the Sobel edge map in place of the IGA mask.
    pub fn sobel(base: ModelOptions) -> Self {
        Self {
            label: SOBEL_LABEL.into(),
            options: ModelOptions {
                mask: MaskSource::Sobel,
                norm: base.norm,
                ..ModelOptions::variant(Variant::Both)
            },
        }
    }
}

/// Basic, w MC., w Att., Both.
pub fn standard_entries(base: ModelOptions) -> Vec<AblationEntry> {
    Variant::ALL
        .iter()
        .map(|&v| AblationEntry::variant(v, base))
        .collect()
}

/// Scores of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub identity_bpa: f64,
    pub combined_bpa: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<AblationRun>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&AblationRun) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn identity_bpa(&self) -> f64 {
        self.mean(|r| r.identity_bpa)
    }

    pub fn combined_bpa(&self) -> f64 {
        self.mean(|r| r.combined_bpa)
    }

    pub fn psnr(&self) -> f64 {
        self.mean(|r| r.psnr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub config: Vec<(String, String)>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Means over seeds, BPA in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>12} {:>9} {:>6}",
            "model", "Identity(%)", "CN(%)", "PSNR(dB)", "seeds"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>12.2} {:>12.2} {:>9.2} {:>6}",
                r.label,
                100.0 * r.identity_bpa(),
                100.0 * r.combined_bpa(),
                r.psnr(),
                r.runs.len()
            );
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "config": self.config.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "rows": self.rows.iter().map(|r| json!({
                "model": r.label,
                "identity_bpa": r.identity_bpa(),
                "combined_bpa": r.combined_bpa(),
                "psnr": r.psnr(),
                "runs": r.runs.iter().map(|x| json!({
                    "seed": x.seed,
                    "identity_bpa": x.identity_bpa,
                    "combined_bpa": x.combined_bpa,
                    "psnr": x.psnr,
                })).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Trains every entry once per seed and scores the final model on `val`
/// under identity and combined noise. `progress` sees each finished epoch.
pub fn run_ablation(
    base: &RunConfig,
    entries: &[AblationEntry],
    seeds: &[u64],
    train: &[Tensor<f32>],
    val: &[Tensor<f32>],
    mut progress: impl FnMut(&str, u64, &EpochRecord),
) -> Result<AblationReport> {
    let channels = [ChannelConfig::identity(), ChannelConfig::combined()];
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            config.options = entry.options;
            config.seed = seed;
            let mut state = TrainState::new(config)?;
            let mut cb = |r: &EpochRecord| progress(&entry.label, seed, r);
            fit(
                &mut state,
                train,
                FitOptions {
                    epochs: base.epochs as u64,
                    on_epoch: Some(&mut cb),
                    ..FitOptions::default()
                },
            )?;
            let report = evaluate(&state.model, val, &channels, seed, base.batch_size)?;
            runs.push(AblationRun {
                seed,
                identity_bpa: report.rows[0].bpa_mean,
                combined_bpa: report.rows[1].bpa_mean,
                psnr: report.rows[0].psnr_mean,
            });
        }
        rows.push(AblationRow {
            label: entry.label.clone(),
            runs,
        });
    }
    Ok(AblationReport {
        rows,
        config: base.to_kv(),
    })
}
