use igahide::distortions::{
    bilinear_matrix, crop, crop_side, cropout, dropout, jpeg, realize, resize, sample_channel,
    ChannelConfig, DistortionKind, DistortionSpec, JpegMode,
};
use igahide::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        rand::Rng::random_range(&mut r, 0.0..1.0)
    })
}

#[test]
fn identity_is_exact() {
    let x = image(&[2, 3, 16, 16], 1);
    assert_eq!(igahide::distortions::identity(&x), x);
}

#[test]
fn crop_keeps_exact_square() {
    assert_eq!(crop_side(0.25, 128, 128), (64, 64));
    let ones = Tensor::<f64>::ones(vec![3, 128, 128]);
    for (p, seed) in [(0.25, 1), (0.3, 2), (0.5, 3), (0.9, 4)] {
        let out = crop(&ones, p, &mut rng(seed)).unwrap();
        let (sh, sw) = crop_side(p, 128, 128);
        let kept = out.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(kept, 3 * sh * sw, "p={p}");
        assert_eq!(
            out.data().iter().filter(|&&v| v == 0.0).count(),
            3 * (128 * 128 - sh * sw)
        );
    }
    let x = image(&[3, 64, 64], 5);
    let near_full = crop(&x, 0.9999, &mut rng(6)).unwrap();
    assert!(x.max_abs_diff(&near_full) <= 1.0);
    let kept = near_full
        .data()
        .iter()
        .zip(x.data())
        .filter(|(a, b)| a == b)
        .count();
    assert!(kept >= 3 * 63 * 63);
}

#[test]
fn crop_rejects_closed_ends() {
    let x = image(&[3, 8, 8], 1);
    for p in [0.0, 1.0, -0.1, 1.5] {
        assert!(crop(&x, p, &mut rng(0)).is_err(), "p={p}");
    }
}

#[test]
fn cropout_and_dropout_boundaries_are_exact() {
    let en = image(&[2, 3, 32, 32], 1);
    let co = image(&[2, 3, 32, 32], 2);
    assert_eq!(cropout(&en, &co, 1.0, &mut rng(3)).unwrap(), en);
    assert_eq!(cropout(&en, &co, 0.0, &mut rng(3)).unwrap(), co);
    assert_eq!(dropout(&en, &co, 1.0, &mut rng(3)).unwrap(), en);
    assert_eq!(dropout(&en, &co, 0.0, &mut rng(3)).unwrap(), co);
}

#[test]
fn cropout_pixels_come_from_either_source() {
    let en = image(&[3, 64, 64], 1);
    let co = image(&[3, 64, 64], 2);
    let out = cropout(&en, &co, 0.3, &mut rng(4)).unwrap();
    let mut from_en = 0;
    for ((&o, &e), &c) in out.data().iter().zip(en.data()).zip(co.data()) {
        assert!(o == e || o == c);
        from_en += usize::from(o == e && o != c);
    }
    let (sh, sw) = crop_side(0.3, 64, 64);
    assert_eq!(from_en, 3 * sh * sw);
}

#[test]
fn dropout_fraction_within_binomial_bound() {
    let en = Tensor::<f64>::ones(vec![3, 128, 128]);
    let co = Tensor::<f64>::zeros(vec![3, 128, 128]);
    let p = 0.3;
    let out = dropout(&en, &co, p, &mut rng(7)).unwrap();
    let n = 128.0 * 128.0;
    let frac = out.data()[..128 * 128].iter().sum::<f64>() / n;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((frac - p).abs() <= 3.0 * sigma, "{frac}");
    let plane = 128 * 128;
    assert_eq!(
        &out.data()[..plane],
        &out.data()[plane..2 * plane],
        "one draw per spatial pixel"
    );
}

#[test]
fn shape_mismatch_is_an_error() {
    let en = image(&[3, 8, 8], 1);
    let co = image(&[3, 8, 16], 2);
    assert!(cropout(&en, &co, 0.3, &mut rng(0)).is_err());
    assert!(dropout(&en, &co, 0.3, &mut rng(0)).is_err());
}

#[test]
fn resize_preserves_constants_and_shape() {
    let c = Tensor::<f64>::full(vec![2, 3, 64, 64], 0.42);
    for z in [0.3, 0.5, 0.7, 0.95] {
        let out = resize(&c, z).unwrap();
        assert_eq!(out.shape(), c.shape());
        assert!(out.max_abs_diff(&c) <= 1e-12, "z={z}");
    }
    let x = image(&[3, 8, 8], 3);
    assert_eq!(resize(&x, 0.5).unwrap().shape(), x.shape());
    assert!(resize(&x, 0.01).is_err());
}

#[test]
fn bilinear_rows_sum_to_one() {
    for (m, n) in [(45, 64), (64, 45), (1, 8), (8, 1)] {
        let a = bilinear_matrix::<f64>(m, n);
        for row in a.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn jpeg_approx_full_mask_round_trip() {
    let x = image(&[2, 3, 16, 24], 4);
    let out = jpeg(&x, 100.0, JpegMode::TrainApprox).unwrap();
    assert!(out.max_abs_diff(&x) <= 1e-6);
}

#[test]
fn jpeg_keeps_constants() {
    let c = Tensor::<f64>::full(vec![3, 16, 16], 0.6);
    for q in [1.0, 10.0, 50.0, 90.0] {
        assert!(
            jpeg(&c, q, JpegMode::TrainApprox).unwrap().max_abs_diff(&c) <= 1e-9,
            "q={q}"
        );
    }
    let real = jpeg(&c, 50.0, JpegMode::EvalReal).unwrap();
    assert!(real.max_abs_diff(&c) <= 1.5 / 255.0);
}

#[test]
fn jpeg_requires_block_aligned_dims() {
    let x = image(&[3, 12, 16], 1);
    assert!(jpeg(&x, 50.0, JpegMode::TrainApprox).is_err());
    assert!(jpeg(&x, 50.0, JpegMode::EvalReal).is_err());
    assert!(jpeg(&image(&[3, 8, 8], 1), 0.0, JpegMode::TrainApprox).is_err());
}

#[test]
fn jpeg_output_in_unit_range() {
    let x = image(&[3, 16, 16], 9).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    for mode in [JpegMode::TrainApprox, JpegMode::EvalReal] {
        let out = jpeg(&x, 10.0, mode).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn combined_sampler_is_uniform_over_five() {
    let cfg = ChannelConfig::combined();
    let mut r = rng(11);
    let mut counts = std::collections::HashMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        *counts
            .entry(sample_channel(&cfg, &mut r).unwrap().kind())
            .or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 5);
    assert!(!counts.contains_key(&DistortionKind::Identity));
    for (kind, n) in counts {
        let f = n as f64 / draws as f64;
        assert!((f - 0.2).abs() <= 0.02, "{kind:?}: {f}");
    }
}

#[test]
fn sampler_determinism_and_fixed_mode() {
    let cfg = ChannelConfig::combined();
    let a: Vec<_> = {
        let mut r = rng(5);
        (0..50)
            .map(|_| sample_channel(&cfg, &mut r).unwrap())
            .collect()
    };
    let b: Vec<_> = {
        let mut r = rng(5);
        (0..50)
            .map(|_| sample_channel(&cfg, &mut r).unwrap())
            .collect()
    };
    assert_eq!(a, b);
    let fixed = ChannelConfig::identity();
    let mut r = rng(1);
    assert!((0..100).all(|_| sample_channel(&fixed, &mut r).unwrap() == DistortionSpec::Identity));
    assert!("combined(crop)".parse::<ChannelConfig>().is_err());
}

fn any_spec() -> impl Strategy<Value = DistortionSpec> {
    prop_oneof![
        Just(DistortionSpec::Identity),
        (0.01f64..0.99).prop_map(|p| DistortionSpec::Crop { p }),
        (0.0f64..=1.0).prop_map(|p| DistortionSpec::Cropout { p }),
        (0.0f64..=1.0).prop_map(|p| DistortionSpec::Dropout { p }),
        (0.2f64..0.99).prop_map(|z| DistortionSpec::Resize { z }),
        (1.0f64..=100.0).prop_map(|q| DistortionSpec::Jpeg { q }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_distortion_keeps_shape_and_range(
        spec in any_spec(),
        seed in any::<u64>(),
        hb in 1usize..4,
        wb in 1usize..4,
        real in any::<bool>(),
    ) {
        let shape = [2, 3, 8 * hb, 8 * wb];
        let en = image(&shape, seed);
        let co = image(&shape, seed ^ 1);
        let mode = if real { JpegMode::EvalReal } else { JpegMode::TrainApprox };
        let mut r = rng(seed);
        let out = realize::<f64, _>(&spec, &shape, mode, &mut r).unwrap().apply(&en, &co).unwrap();
        prop_assert_eq!(out.shape(), &shape[..]);
        prop_assert!(out.data().iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn realization_is_seed_deterministic(spec in any_spec(), seed in any::<u64>()) {
        let shape = [2, 3, 16, 16];
        let en = image(&shape, seed);
        let a = realize::<f64, _>(&spec, &shape, JpegMode::TrainApprox, &mut rng(seed)).unwrap().apply(&en, &en).unwrap();
        let b = realize::<f64, _>(&spec, &shape, JpegMode::TrainApprox, &mut rng(seed)).unwrap().apply(&en, &en).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn spec_strings_round_trip(spec in any_spec()) {
        let back: DistortionSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(back, spec);
    }
}
