//! The four convolutional networks: feature extractor, embedder, decoder and
//! discriminator, all built from `Conv3x3 -> BatchNorm -> ReLU` blocks.
//!
//! Parameters live in one [`ParamStore`] under the prefixes `ext.`, `emb.`,
//! `dec.` and `disc.`; batch-norm running statistics are kept apart so the
//! optimizer never sees them.

use std::cell::RefCell;

use rand::Rng;

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Discriminator probabilities are kept in `[DISC_EPS, 1 - DISC_EPS]`.
pub const DISC_EPS: f64 = 1e-6;
/// Cover pixels are clamped away from 0 and 1 before the logit residual.
pub const COVER_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Convolution width shared by all four networks.
    pub base_width: usize,
    pub ext_blocks: usize,
    pub emb_blocks: usize,
    pub dec_blocks: usize,
    pub disc_blocks: usize,
    pub k: usize,
    pub l: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            channels: 3,
            base_width: 64,
            ext_blocks: 4,
            emb_blocks: 2,
            dec_blocks: 6,
            disc_blocks: 3,
            k: 30,
            l: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(8)
            || !self.width.is_multiple_of(8)
        {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.height, self.width
            ));
        }
        if self.channels != 3 {
            return bad(format!(
                "only 3-channel images are supported, got {}",
                self.channels
            ));
        }
        if self.base_width == 0 {
            return bad("base width must be positive".into());
        }
        if self.ext_blocks == 0
            || self.emb_blocks == 0
            || self.dec_blocks == 0
            || self.disc_blocks == 0
        {
            return bad("every network needs at least one block".into());
        }
        if self.l == 0 || self.l >= self.k {
            return bad(format!("need 0 < l < k, got k={} l={}", self.k, self.l));
        }
        Ok(())
    }

    /// Length of the vector actually spread over the image: l with the
    /// message codec, the raw k bits without it.
    pub fn payload_len(&self, use_msgcodec: bool) -> usize {
        if use_msgcodec {
            self.l
        } else {
            self.k
        }
    }
}

/// Weights and running statistics of the four networks.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real = f32> {
    pub weights: ParamStore<T>,
    pub stats: ParamStore<T>,
}

fn add_block<T: Real, R: Rng>(
    p: &mut ModelParams<T>,
    name: &str,
    ci: usize,
    co: usize,
    rng: &mut R,
) {
    p.weights.insert(
        format!("{name}.w"),
        fan_in_uniform(&[co, ci, 3, 3], ci * 9, rng),
    );
    p.weights
        .insert(format!("{name}.b"), Tensor::zeros(vec![co]));
    p.weights
        .insert(format!("{name}.gamma"), Tensor::ones(vec![co]));
    p.weights
        .insert(format!("{name}.beta"), Tensor::zeros(vec![co]));
    p.stats
        .insert(format!("{name}.mean"), Tensor::zeros(vec![co]));
    p.stats
        .insert(format!("{name}.var"), Tensor::ones(vec![co]));
}

fn add_linear<T: Real, R: Rng>(
    p: &mut ModelParams<T>,
    name: &str,
    i: usize,
    o: usize,
    rng: &mut R,
) {
    p.weights
        .insert(format!("{name}.w"), fan_in_uniform(&[i, o], i, rng));
    p.weights
        .insert(format!("{name}.b"), Tensor::zeros(vec![o]));
}

impl<T: Real> ModelParams<T> {
    /// Random initialization; `payload` is the per-pixel message depth
    /// ([`NetConfig::payload_len`]).
    pub fn init<R: Rng>(cfg: &NetConfig, payload: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let c = cfg.channels;
        let mut p = Self {
            weights: ParamStore::new(),
            stats: ParamStore::new(),
        };
        for i in 0..cfg.ext_blocks {
            add_block(
                &mut p,
                &format!("ext.b{i}"),
                if i == 0 { c } else { w },
                w,
                rng,
            );
        }
        for i in 0..cfg.emb_blocks {
            let ci = if i == 0 { w + payload + c } else { w };
            add_block(&mut p, &format!("emb.b{i}"), ci, w, rng);
        }
        p.weights
            .insert("emb.out.w", fan_in_uniform(&[c, w, 1, 1], w, rng));
        p.weights.insert("emb.out.b", Tensor::zeros(vec![c]));
        for i in 0..cfg.dec_blocks {
            let co = if i + 1 == cfg.dec_blocks { payload } else { w };
            add_block(
                &mut p,
                &format!("dec.b{i}"),
                if i == 0 { c } else { w },
                co,
                rng,
            );
        }
        add_linear(&mut p, "dec.out", payload, payload, rng);
        for i in 0..cfg.disc_blocks {
            add_block(
                &mut p,
                &format!("disc.b{i}"),
                if i == 0 { c } else { w },
                w,
                rng,
            );
        }
        add_linear(&mut p, "disc.out", w, 1, rng);
        Ok(p)
    }

    /// Checks that every tensor required by `cfg` is present with the right shape.
    pub fn check(&self, cfg: &NetConfig, payload: usize) -> Result<()> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let want = Self::init(cfg, payload, &mut rng)?;
        for (store, have) in [(&want.weights, &self.weights), (&want.stats, &self.stats)] {
            for (name, t) in store.iter() {
                match have.get(name) {
                    Some(h) if h.shape() == t.shape() => {}
                    Some(h) => {
                        return Err(Error::shape(format!(
                            "parameter {name}: expected {:?}, found {:?}",
                            t.shape(),
                            h.shape()
                        )))
                    }
                    None => return Err(Error::shape(format!("missing parameter {name}"))),
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            weights: self.weights.cast(),
            stats: self.stats.cast(),
        }
    }
}

/// Per-channel batch statistics observed in a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Real> {
    pub block: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub count: usize,
}

/// How batch normalization behaves during a forward pass.
pub enum NormMode<'a, T: Real> {
    /// Batch statistics; observed statistics are appended to the log if present.
    Train(Option<&'a RefCell<Vec<BatchStats<T>>>>),
    /// Frozen running statistics.
    Eval,
}

/// Everything a forward pass reads: bound weights, running statistics, mode.
pub struct Nets<'a, T: Real> {
    pub params: &'a Bound<T>,
    pub stats: &'a ParamStore<T>,
    pub mode: NormMode<'a, T>,
}

impl<T: Real> Nets<'_, T> {
    fn block(&self, x: &Var<T>, name: &str) -> Result<Var<T>> {
        let p = |s: &str| self.params.get(&format!("{name}.{s}"));
        let y = x.conv2d(p("w")?, p("b")?)?;
        let eps = T::c(BN_EPS);
        let y = match &self.mode {
            NormMode::Train(log) => {
                let (y, mean, var) = y.batch_norm_train(p("gamma")?, p("beta")?, eps)?;
                if let Some(log) = log {
                    let s = x.shape();
                    log.borrow_mut().push(BatchStats {
                        block: name.to_string(),
                        mean,
                        var,
                        count: s[0] * s[2] * s[3],
                    });
                }
                y
            }
            NormMode::Eval => y.batch_norm_eval(
                p("gamma")?,
                p("beta")?,
                self.stats.require(&format!("{name}.mean"))?,
                self.stats.require(&format!("{name}.var"))?,
                eps,
            )?,
        };
        Ok(y.relu())
    }

    fn blocks(&self, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
        let mut y = x.clone();
        let mut i = 0;
        while self.params.get(&format!("{prefix}.b{i}.w")).is_ok() {
            y = self.block(&y, &format!("{prefix}.b{i}"))?;
            i += 1;
        }
        if i == 0 {
            return Err(Error::shape(format!("network {prefix} has no blocks")));
        }
        Ok(y)
    }

    fn linear(&self, x: &Var<T>, name: &str) -> Result<Var<T>> {
        x.matmul(self.params.get(&format!("{name}.w"))?)?
            .add_row_bias(self.params.get(&format!("{name}.b"))?)
    }

    /// `F_co`: extractor features of the attended cover, concatenated with
    /// the spatially expanded message `[N, L, H, W]`.
    pub fn extract_features(&self, attended: &Var<T>, m_expanded: &Var<T>) -> Result<Var<T>> {
        let (a, m) = (attended.shape(), m_expanded.shape());
        if a.len() != 4 || m.len() != 4 || a[0] != m[0] || a[2..] != m[2..] {
            return Err(Error::shape(format!(
                "extractor inputs {a:?} and {m:?} differ in batch or spatial size"
            )));
        }
        let f = self.blocks(attended, "ext")?;
        Var::concat_channels(&[&f, m_expanded])
    }

    /// Encoded image `sigmoid(logit(cover) + r)` where `r` is predicted from
    /// `F_co` and the cover. Values stay in [0, 1].
    pub fn embed(&self, f_co: &Var<T>, cover: &Var<T>) -> Result<Var<T>> {
        let x = Var::concat_channels(&[f_co, cover])?;
        let h = self.blocks(&x, "emb")?;
        let r = h.conv2d(self.params.get("emb.out.w")?, self.params.get("emb.out.b")?)?;
        let base = cover.logit(T::c(COVER_EPS));
        Ok(base.add(&r)?.sigmoid())
    }

    /// `M_de`: `[N, L]` values recovered from a (noised) image. The last
    /// block has L channels; they are pooled and mixed by a linear head.
    pub fn decode(&self, noised: &Var<T>) -> Result<Var<T>> {
        let h = self.blocks(noised, "dec")?.global_avg_pool()?;
        self.linear(&h, "dec.out")
    }

    /// Probability `[N, 1]` that each image is a cover, clamped away from 0 and 1.
    pub fn discriminate(&self, img: &Var<T>) -> Result<Var<T>> {
        let h = self.blocks(img, "disc")?.global_avg_pool()?;
        Ok(self
            .linear(&h, "disc.out")?
            .sigmoid()
            .clamp(T::c(DISC_EPS), T::c(1.0 - DISC_EPS)))
    }
}

/// Folds observed batch statistics into the running averages
/// (momentum [`BN_MOMENTUM`], unbiased variance).
pub fn update_running_stats<T: Real>(
    stats: &mut ParamStore<T>,
    observed: &[BatchStats<T>],
) -> Result<()> {
    let mom = T::c(BN_MOMENTUM);
    for s in observed {
        let unbias = if s.count > 1 {
            T::c(s.count as f64 / (s.count - 1) as f64)
        } else {
            T::one()
        };
        for (key, batch, scale) in [("mean", &s.mean, T::one()), ("var", &s.var, unbias)] {
            let run = stats
                .get_mut(&format!("{}.{key}", s.block))
                .ok_or_else(|| Error::shape(format!("missing running {key} for {}", s.block)))?;
            for (r, &b) in run.data_mut().iter_mut().zip(batch.data()) {
                *r = (T::one() - mom) * *r + mom * b * scale;
            }
        }
    }
    Ok(())
}
