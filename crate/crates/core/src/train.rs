//! Optimization: losses, the two-pass attention step, alternating
//! discriminator/generator updates, and the epoch loop.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::config::{LossWeights, RunConfig};
use crate::dataio::{derive_seed, random_message};
use crate::diff::{Gradients, Tape, Var};
use crate::distortions::{realize, sample_channel, DistortionSpec, JpegMode};
use crate::error::{Error, Result};
use crate::metrics::{bpa, evaluate};
use crate::msgcodec::BitMessage;
use crate::nets::{update_running_stats, Nets, NormMode, DISC_EPS};
use crate::params::Bound;
use crate::pipeline::{forward, message_batch, Model, CODEC_PREFIX};
use crate::tensor::{Real, Tensor};

pub const DISC_PREFIX: &str = "disc.";

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_VAL: u64 = 3;

/// `w_i * mean((cover - encoded)^2)`.
pub fn image_loss<T: Real>(cover: &Var<T>, encoded: &Var<T>, w_i: T) -> Result<Var<T>> {
    Ok(encoded.mse(cover)?.scale(w_i))
}

/// `(L_D, L_G)` from discriminator outputs on covers and encoded images:
/// `L_D = -w_d * mean(log D(cover) + log(1 - D(encoded)))`,
/// `L_G = w_g * mean(log(1 - D(encoded)))`. Probabilities are clamped first.
pub fn adversarial_losses<T: Real>(
    d_cover: &Var<T>,
    d_encoded: &Var<T>,
    w_d: T,
    w_g: T,
) -> Result<(Var<T>, Var<T>)> {
    let (lo, hi) = (T::c(DISC_EPS), T::c(1.0 - DISC_EPS));
    let log_real = d_cover.clamp(lo, hi).log();
    let log_fake = d_encoded.clamp(lo, hi).neg().add_scalar(T::one()).log();
    let l_d = log_real.add(&log_fake)?.mean().scale(-w_d);
    let l_g = log_fake.mean().scale(w_g);
    Ok((l_d, l_g))
}

/// Adam with bias correction; moments are created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: crate::params::ParamStore<f32>,
    pub v: crate::params::ParamStore<f32>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Default::default(),
            v: Default::default(),
        }
    }

    /// Advances the step counter; call once before the [`update`](Self::update)s of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter from its gradient.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
    ) -> Result<()> {
        param.expect_same_shape(grad)?;
        let t = self.t.max(1) as i32;
        let step = (self.lr / (1.0 - self.beta1.powi(t))) as f32;
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt() as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        if self.m.get(name).is_none() {
            self.m.insert(name, Tensor::zeros(grad.shape().to_vec()));
            self.v.insert(name, Tensor::zeros(grad.shape().to_vec()));
        }
        let m = self.m.get_mut(name).expect("moment exists");
        for (mi, &gi) in m.data_mut().iter_mut().zip(grad.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = self.v.get_mut(name).expect("moment exists");
        for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (self.m.require(name)?, self.v.require(name)?);
        for ((pi, &mi), &vi) in param.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *pi -= step * mi / (vi.sqrt() / bc2_sqrt + eps);
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

fn collect_grads(
    bound: &Bound<f32>,
    grads: &mut Gradients<f32>,
) -> Result<Vec<(String, Tensor<f32>)>> {
    bound
        .iter()
        .filter(|(_, v)| v.requires_grad())
        .map(|(n, v)| Ok((n.clone(), grads.take(v)?)))
        .collect()
}

/// Losses and accuracy of one step (all weighted as in the objective).
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_mr: f64,
    pub l_md: f64,
    pub l_ir: f64,
    pub l_g: f64,
    pub l_d: f64,
    /// `l_mr + l_md + l_ir + l_g`.
    pub generator: f64,
    pub bpa: f64,
    pub distortion: DistortionSpec,
}

/// Model, optimizers and counters of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
    pub best_val_bpa: Option<f64>,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT));
        let model = Model::init(
            config.net.clone(),
            config.options,
            config.codec_hidden,
            &mut rng,
        )?;
        Ok(Self {
            gen_opt: Adam::new(config.lr),
            disc_opt: Adam::new(config.lr),
            config,
            model,
            epoch: 0,
            step: 0,
            best_val_bpa: None,
        })
    }

    pub fn weights(&self) -> LossWeights {
        self.config.weights
    }

    fn apply(&mut self, disc: bool, grads: &[(String, Tensor<f32>)]) -> Result<()> {
        let opt = if disc {
            &mut self.disc_opt
        } else {
            &mut self.gen_opt
        };
        opt.begin_step();
        for (name, g) in grads {
            let p = match name.strip_prefix(CODEC_PREFIX) {
                Some(rest) => self
                    .model
                    .codec
                    .as_mut()
                    .and_then(|c| c.store_mut().get_mut(rest)),
                None => self.model.params.weights.get_mut(name),
            }
            .ok_or_else(|| Error::shape(format!("no parameter {name}")))?;
            opt.update(name, p, g)?;
        }
        Ok(())
    }
}

fn non_finite(step: u64) -> Error {
    Error::Diverged {
        step,
        last_checkpoint: None,
    }
}

/// One optimization step on a batch of covers `[N, 3, H, W]` and messages.
///
/// 1. Attention mask from a pass with an all-ones mask (skipped without attention).
/// 2. Generator pass through a channel drawn from `rng`.
/// 3. Discriminator update on covers and detached encoded images.
/// 4. Generator update on `L_MR + L_MD + L_IR + L_G`.
pub fn train_step<R: Rng>(
    state: &mut TrainState,
    covers: &Tensor<f32>,
    msgs: &[BitMessage],
    rng: &mut R,
) -> Result<LossReport> {
    let w = state.weights();
    let clip = state.config.grad_clip;
    let use_codec = state.model.options.use_msgcodec;
    if msgs.len() != covers.shape().first().copied().unwrap_or(0) {
        return Err(Error::shape("one message per cover is required"));
    }
    let m_t = message_batch::<f32>(msgs)?;
    let masks = state.model.masks(covers, &m_t, true)?;
    let spec = sample_channel(&state.config.channel, rng)?;
    let channel = realize(&spec, covers.shape(), JpegMode::TrainApprox, rng)?;

    let tape = Tape::new();
    let bound = state.model.bind(&tape, |n| !n.starts_with(DISC_PREFIX));
    let gen_log = RefCell::new(Vec::new());
    let nets = Nets {
        params: &bound,
        stats: &state.model.params.stats,
        mode: NormMode::Train(Some(&gen_log)),
    };
    let cover = tape.constant(covers.clone());
    let attended = cover.mul(&tape.constant(masks))?;
    let m = tape.constant(m_t);
    let pass = forward(&nets, use_codec, &cover, &attended, &m, &channel)?;
    let l_mr = pass.m_out.mse(&m)?.scale(w.mr as f32);
    let l_md = if use_codec {
        Some(pass.m_de.mse(&pass.m_en)?.scale(w.md as f32))
    } else {
        None
    };
    let l_ir = image_loss(&cover, &pass.i_en, w.image as f32)?;

    // Discriminator update on a separate tape: no path back to the generator.
    let l_d_value = {
        let dtape = Tape::new();
        let dbound =
            state
                .model
                .params
                .weights
                .bind_where(&dtape, |n| n.starts_with(DISC_PREFIX), |_| true);
        let dlog = RefCell::new(Vec::new());
        let dnets = Nets {
            params: &dbound,
            stats: &state.model.params.stats,
            mode: NormMode::Train(Some(&dlog)),
        };
        let d_cov = dnets.discriminate(&dtape.constant(covers.clone()))?;
        let d_enc = dnets.discriminate(&dtape.constant(pass.i_en.value().clone()))?;
        let (l_d, _) = adversarial_losses(&d_cov, &d_enc, w.disc as f32, 0.0)?;
        let v = f64::from(l_d.value().item());
        if !v.is_finite() {
            return Err(non_finite(state.step));
        }
        let mut g = dtape.backward(&l_d)?;
        let mut grads = collect_grads(&dbound, &mut g)?;
        clip_grad_norm(&mut grads, clip);
        state.apply(true, &grads)?;
        update_running_stats(&mut state.model.params.stats, &dlog.into_inner())?;
        v
    };

    // Generator adversarial term against the updated discriminator.
    let disc_bound =
        state
            .model
            .params
            .weights
            .bind_where(&tape, |n| n.starts_with(DISC_PREFIX), |_| false);
    let gnets = Nets {
        params: &disc_bound,
        stats: &state.model.params.stats,
        mode: NormMode::Train(None),
    };
    let d_enc = gnets.discriminate(&pass.i_en)?;
    let (_, l_g) = adversarial_losses(&d_enc, &d_enc, 0.0, w.gen as f32)?;

    let mut total = l_mr.add(&l_ir)?.add(&l_g)?;
    if let Some(md) = &l_md {
        total = total.add(md)?;
    }
    let gen_value = f64::from(total.value().item());
    if !gen_value.is_finite() {
        return Err(non_finite(state.step));
    }
    let mut g = tape.backward(&total)?;
    let mut grads = collect_grads(&bound, &mut g)?;
    clip_grad_norm(&mut grads, clip);
    state.apply(false, &grads)?;
    update_running_stats(&mut state.model.params.stats, &gen_log.into_inner())?;

    let k = state.model.net.k;
    let out = pass.m_out.value().data();
    let mut acc = 0.0;
    for (i, msg) in msgs.iter().enumerate() {
        acc += bpa(msg, &BitMessage::binarize(&out[i * k..(i + 1) * k])?)?;
    }
    state.step += 1;
    Ok(LossReport {
        l_mr: f64::from(l_mr.value().item()),
        l_md: l_md.map_or(0.0, |v| f64::from(v.value().item())),
        l_ir: f64::from(l_ir.value().item()),
        l_g: f64::from(l_g.value().item()),
        l_d: l_d_value,
        generator: gen_value,
        bpa: acc / msgs.len() as f64,
        distortion: spec,
    })
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: u64,
    pub steps: Vec<LossReport>,
    pub mean_generator: f64,
    pub mean_l_d: f64,
    pub train_bpa: f64,
    pub val_bpa: Option<f64>,
}

pub struct FitOptions<'a> {
    /// Total number of epochs; a resumed state continues up to this count.
    pub epochs: u64,
    pub val: Option<&'a [Tensor<f32>]>,
    /// Receives `last.ckpt` every epoch and `best.ckpt` on improvement.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        Self {
            epochs: 1,
            val: None,
            checkpoint_dir: None,
            on_epoch: None,
        }
    }
}

pub struct FitSummary {
    pub history: Vec<EpochRecord>,
    /// State with the best validation accuracy (the final state without validation).
    pub best: TrainState,
}

/// Mean bit accuracy over `images` under the training channel, evaluation mode.
pub fn validation_bpa(state: &TrainState, images: &[Tensor<f32>]) -> Result<f64> {
    let report = evaluate(
        &state.model,
        images,
        std::slice::from_ref(&state.config.channel),
        derive_seed(state.config.seed, TAG_VAL),
        state.config.batch_size,
    )?;
    Ok(report.rows[0].bpa_mean)
}

/// Runs epochs of shuffled mini-batches with fresh random messages.
pub fn fit(
    state: &mut TrainState,
    data: &[Tensor<f32>],
    mut opts: FitOptions<'_>,
) -> Result<FitSummary> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let bs = state.config.batch_size;
    let k = state.config.net.k;
    let seed = state.config.seed;
    let mut history = Vec::new();
    let mut best = state.clone();
    let mut last_ckpt: Option<PathBuf> = None;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("last.ckpt");
        if p.exists() {
            last_ckpt = Some(p);
        }
    }
    while state.epoch < opts.epochs {
        let epoch_seed = derive_seed(derive_seed(seed, TAG_EPOCH), state.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut steps = Vec::new();
        for (b, idx) in order.chunks(bs).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, b as u64));
            let covers = Tensor::stack(&idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>())?;
            let msgs = idx
                .iter()
                .map(|_| random_message(k, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let report = train_step(state, &covers, &msgs, &mut rng).map_err(|e| match e {
                Error::Diverged { step, .. } => Error::Diverged {
                    step,
                    last_checkpoint: last_ckpt.clone(),
                },
                other => other,
            })?;
            steps.push(report);
        }
        state.epoch += 1;
        let n = steps.len() as f64;
        let val_bpa = opts.val.map(|v| validation_bpa(state, v)).transpose()?;
        let record = EpochRecord {
            epoch: state.epoch,
            mean_generator: steps.iter().map(|s| s.generator).sum::<f64>() / n,
            mean_l_d: steps.iter().map(|s| s.l_d).sum::<f64>() / n,
            train_bpa: steps.iter().map(|s| s.bpa).sum::<f64>() / n,
            val_bpa,
            steps,
        };
        let improved = match (val_bpa, state.best_val_bpa) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            if val_bpa.is_some() {
                state.best_val_bpa = val_bpa;
            }
            best = state.clone();
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let p = dir.join("last.ckpt");
            save_checkpoint(&p, state)?;
            last_ckpt = Some(p);
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), &best)?;
            }
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok(FitSummary { history, best })
}

/// Convenience for callers holding a checkpoint directory path.
pub fn last_checkpoint(dir: &Path) -> Option<PathBuf> {
    let p = dir.join("last.ckpt");
    p.exists().then_some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(t: &Tape<f64>, x: Vec<f64>) -> Var<f64> {
        t.constant(Tensor::new(vec![x.len()], x).unwrap())
    }

    #[test]
    fn image_loss_arithmetic() {
        let t = Tape::new();
        let c = t.constant(Tensor::<f64>::full(vec![1, 3, 2, 2], 0.5));
        assert_eq!(image_loss(&c, &c, 0.7).unwrap().value().item(), 0.0);
        let e = t.constant(Tensor::full(vec![1, 3, 2, 2], 0.6));
        assert!((image_loss(&c, &e, 0.7).unwrap().value().item() - 0.007).abs() < 1e-12);
    }

    #[test]
    fn adversarial_equilibrium() {
        let t = Tape::new();
        let half = v(&t, vec![0.5, 0.5]);
        let (l_d, l_g) = adversarial_losses(&half, &half, 1.0, 0.001).unwrap();
        assert!((l_d.value().item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l_g.value().item() - 0.001 * 0.5f64.ln()).abs() < 1e-15);
        let (l_d, _) =
            adversarial_losses(&v(&t, vec![1.0]), &v(&t, vec![0.0]), 1.0, 0.001).unwrap();
        assert!(l_d.value().item() < 1e-5);
        let (l_d, l_g) =
            adversarial_losses(&v(&t, vec![0.0]), &v(&t, vec![1.0]), 1.0, 1.0).unwrap();
        assert!(l_d.value().is_finite() && l_g.value().is_finite());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(0.01);
        let mut p = Tensor::<f32>::full(vec![2], 1.0);
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())
            .unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.data()[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut g = vec![(
            "a".to_string(),
            Tensor::<f32>::new(vec![2], vec![3.0, 4.0]).unwrap(),
        )];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.l2_norm() - 1.0).abs() < 1e-6);
    }
}
