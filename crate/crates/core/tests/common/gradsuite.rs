//! Finite-difference checks of every differentiable component, shared by the
//! gradient tests and the acceptance suite.

use super::{max_rel_error, rand_tensor, rel_errors, REL_TOL};
use igahide::diff::Var;
use igahide::distortions::{realize, DistortionSpec, JpegMode, Realized};
use igahide::msgcodec::{decode_var, encode_var, message_losses_var, MsgCodecParams};
use igahide::nets::{ModelParams, NetConfig, Nets, NormMode};
use igahide::params::Bound;
use igahide::pipeline::{forward, Model, ModelOptions, Variant};
use igahide::train::{adversarial_losses, image_loss};
use igahide::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named relative errors.
pub type Report = Vec<(String, f64)>;

pub fn mini() -> NetConfig {
    NetConfig {
        height: 16,
        width: 16,
        base_width: 4,
        ext_blocks: 2,
        emb_blocks: 1,
        dec_blocks: 2,
        disc_blocks: 2,
        k: 6,
        l: 3,
        ..NetConfig::default()
    }
}

fn bind_vars(names: &[String], vars: &[Var<f64>]) -> Bound<f64> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().cloned()))
}

pub fn codec() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = MsgCodecParams::<f64>::init(6, 3, 5, &mut rng).unwrap();
    let names: Vec<String> = p.store().names().to_vec();
    let mut inputs = vec![rand_tensor(&[2, 6], 0.0, 1.0, 2)];
    inputs.extend(names.iter().map(|n| p.store().get(n).unwrap().clone()));
    let err = max_rel_error(&inputs, |_, v| {
        let bound = bind_vars(&names, &v[1..]);
        let en = encode_var(&v[0], &bound, "").unwrap();
        decode_var(&en, &bound, "").unwrap()
    });
    vec![("message codec".into(), err)]
}

fn net_error(which: &str, train_norm: bool) -> f64 {
    let cfg = mini();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ModelParams::<f64>::init(&cfg, cfg.l, &mut rng).unwrap();
    let prefix = format!("{which}.");
    let (names, others): (Vec<String>, Vec<String>) = p
        .weights
        .names()
        .iter()
        .cloned()
        .partition(|n| n.starts_with(&prefix));
    let img = rand_tensor(&[2, 3, 16, 16], 0.05, 0.95, 4);
    let extra = match which {
        "ext" => rand_tensor(&[2, cfg.l, 16, 16], 0.0, 1.0, 5),
        "emb" => rand_tensor(&[2, cfg.base_width + cfg.l, 16, 16], -1.0, 1.0, 6),
        _ => Tensor::zeros(vec![1]),
    };
    let mut inputs = vec![img, extra];
    inputs.extend(names.iter().map(|n| p.weights.get(n).unwrap().clone()));
    let errs = rel_errors(&inputs, |tape, v| {
        let mut bound = bind_vars(&names, &v[2..]);
        let fixed = p
            .weights
            .bind_where(tape, |n| others.iter().any(|o| o == n), |_| false);
        bound.extend_prefixed("", fixed);
        let nets = Nets {
            params: &bound,
            stats: &p.stats,
            mode: if train_norm {
                NormMode::Train(None)
            } else {
                NormMode::Eval
            },
        };
        match which {
            "ext" => nets.extract_features(&v[0], &v[1]).unwrap(),
            "emb" => nets.embed(&v[1], &v[0]).unwrap(),
            "dec" => nets.decode(&v[0]).unwrap(),
            _ => nets.discriminate(&v[0]).unwrap(),
        }
    });
    let worst = errs.iter().copied().fold(0.0, f64::max);
    if worst > REL_TOL {
        let labels = ["image", "extra"]
            .into_iter()
            .map(String::from)
            .chain(names.iter().cloned());
        for (n, e) in labels.zip(&errs) {
            eprintln!("{which} {n}: {e:e}");
        }
    }
    worst
}

/// Extractor, embedder, decoder and discriminator in both normalization modes.
pub fn networks() -> Report {
    let mut out = Vec::new();
    for which in ["ext", "emb", "dec", "disc"] {
        for train in [true, false] {
            let mode = if train {
                "batch stats"
            } else {
                "running stats"
            };
            out.push((format!("{which} net ({mode})"), net_error(which, train)));
        }
    }
    out
}

/// Every distortion in its training form.
pub fn distortions() -> Report {
    [
        DistortionSpec::Identity,
        DistortionSpec::Crop { p: 0.3 },
        DistortionSpec::Cropout { p: 0.3 },
        DistortionSpec::Dropout { p: 0.3 },
        DistortionSpec::Resize { z: 0.7 },
        DistortionSpec::Jpeg { q: 50.0 },
    ]
    .into_iter()
    .map(|spec| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ch: Realized<f64> =
            realize(&spec, &[2, 3, 8, 8], JpegMode::TrainApprox, &mut rng).unwrap();
        let inputs = vec![
            rand_tensor(&[2, 3, 8, 8], 0.1, 0.9, 10),
            rand_tensor(&[2, 3, 8, 8], 0.1, 0.9, 11),
        ];
        let err = max_rel_error(&inputs, |_, v| ch.apply_var(&v[0], &v[1]).unwrap());
        (format!("distortion {spec}"), err)
    })
    .collect()
}

/// Attention product and the four losses.
pub fn attention_and_losses() -> Report {
    let a = rand_tensor(&[1, 3, 4, 4], 0.0, 1.0, 12);
    let b = rand_tensor(&[1, 3, 4, 4], 0.0, 1.0, 13);
    let m = rand_tensor(&[2, 6], 0.0, 1.0, 14);
    let mo = rand_tensor(&[2, 6], 0.0, 1.0, 15);
    let me = rand_tensor(&[2, 3], 0.0, 1.0, 16);
    let md = rand_tensor(&[2, 3], 0.0, 1.0, 17);
    let dc = rand_tensor(&[3, 1], 0.05, 0.95, 18);
    let de = rand_tensor(&[3, 1], 0.05, 0.95, 19);
    vec![
        (
            "attention product".into(),
            max_rel_error(&[a.clone(), b.clone()], |_, v| v[0].mul(&v[1]).unwrap()),
        ),
        (
            "image loss".into(),
            max_rel_error(&[a, b], |_, v| image_loss(&v[0], &v[1], 0.7).unwrap()),
        ),
        (
            "message losses".into(),
            max_rel_error(&[m, mo, me, md], |_, v| {
                let (mr, md) = message_losses_var(&v[0], &v[1], &v[2], &v[3], 1.0, 0.001).unwrap();
                mr.add(&md).unwrap()
            }),
        ),
        (
            "adversarial losses".into(),
            max_rel_error(&[dc, de], |_, v| {
                let (l_d, l_g) = adversarial_losses(&v[0], &v[1], 1.0, 0.001).unwrap();
                l_d.add(&l_g).unwrap()
            }),
        ),
    ]
}

/// Recovered message with respect to the cover, through every stage.
pub fn pipeline() -> Report {
    [
        ModelOptions::default(),
        ModelOptions::variant(Variant::Basic),
    ]
    .into_iter()
    .map(|options| {
        let model =
            Model::<f64>::init(mini(), options, 8, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
        let cover = rand_tensor(&[2, 3, 16, 16], 0.05, 0.95, 21);
        let msg = Tensor::from_fn(vec![2, 6], |i| (i % 2) as f64);
        let err = max_rel_error(&[cover], |tape, v| {
            let bound = model.bind(tape, |_| false);
            let nets = Nets {
                params: &bound,
                stats: &model.params.stats,
                mode: NormMode::Train(None),
            };
            let m = tape.constant(msg.clone());
            let pass = forward(
                &nets,
                options.use_msgcodec,
                &v[0],
                &v[0],
                &m,
                &Realized::Identity,
            )
            .unwrap();
            pass.m_out
        });
        let name = if options.use_msgcodec {
            "pipeline with codec"
        } else {
            "pipeline without codec"
        };
        (name.to_string(), err)
    })
    .collect()
}

pub fn all() -> Report {
    [
        codec(),
        networks(),
        distortions(),
        attention_and_losses(),
        pipeline(),
    ]
    .concat()
}
