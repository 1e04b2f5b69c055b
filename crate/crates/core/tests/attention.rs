use igahide::attention::{
    apply_attention, expand_message, iga_mask, sobel_mask, AttentionMask, MaskSource,
    NormalizationKind,
};
use igahide::msgcodec::EncodedMessage;
use igahide::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(0.0..1.0))
}

#[test]
fn hand_examples() {
    let g = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap();
    let a = iga_mask(&g, NormalizationKind::MinMax).unwrap();
    assert_eq!(a.source(), MaskSource::Iga);
    for (got, want) in a.values().data().iter().zip([1.0f64, 0.5, 0.0]) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    let zero = iga_mask(
        &Tensor::<f64>::zeros(vec![3, 4, 4]),
        NormalizationKind::MinMax,
    )
    .unwrap();
    assert!(zero.values().data().iter().all(|&v| v == 1.0));

    let cover = Tensor::full(vec![3, 4, 4], 0.5);
    let g = (0.6f64 / 0.4).ln();
    let mask = iga_mask(&Tensor::full(vec![3, 4, 4], g), NormalizationKind::Sigmoid).unwrap();
    let out = apply_attention(&cover, &mask).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    let ones = AttentionMask::ones(&[3, 4, 4]);
    assert_eq!(apply_attention(&cover, &ones).unwrap(), cover);
}

#[test]
fn sobel_brightness_offset_and_translation() {
    let x = image(&[3, 16, 16], 1);
    let base = sobel_mask(&x).unwrap();
    let shifted = sobel_mask(&x.map(|v| v + 0.37)).unwrap();
    assert!(base.values().max_abs_diff(shifted.values()) < 1e-9);

    // A textured patch on a flat background, placed at two offsets.
    let patch = image(&[1, 6, 6], 2);
    let place = |oy: usize, ox: usize| {
        Tensor::from_fn(vec![1, 24, 24], |i| {
            let (y, x) = (i / 24, i % 24);
            if (oy..oy + 6).contains(&y) && (ox..ox + 6).contains(&x) {
                patch.data()[(y - oy) * 6 + (x - ox)]
            } else {
                0.5
            }
        })
    };
    let a = sobel_mask(&place(4, 5)).unwrap();
    let b = sobel_mask(&place(11, 9)).unwrap();
    for y in 2..14 {
        for x in 2..14 {
            let va = a.values().data()[(y + 1) * 24 + (x + 2)];
            let vb = b.values().data()[(y + 8) * 24 + (x + 6)];
            assert!((va - vb).abs() < 1e-12, "({y},{x}) {va} vs {vb}");
        }
    }
}

#[test]
fn sobel_constant_and_small() {
    let m = sobel_mask(&Tensor::full(vec![3, 8, 8], 0.3)).unwrap();
    assert!(m.values().data().iter().all(|&v| v == 0.0));
    assert!(sobel_mask(&Tensor::<f64>::zeros(vec![3, 2, 8])).is_err());
}

#[test]
fn expanded_message_planes() {
    let t: Tensor<f64> = expand_message(
        &EncodedMessage {
            values: vec![0.3, 0.7],
        },
        2,
        2,
    )
    .unwrap();
    assert_eq!(t.shape(), &[2, 2, 2]);
    assert_eq!(t.data(), &[0.3, 0.3, 0.3, 0.3, 0.7, 0.7, 0.7, 0.7]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minmax_mask_inverts_magnitude_order(seed in 0u64..10_000, scale in 1e-6f64..1e3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::from_fn(vec![3, 8, 8], |_| r.random_range(-1.0..1.0) * scale);
        let a = iga_mask(&g, NormalizationKind::MinMax).unwrap();
        let (gd, ad) = (g.data(), a.values().data());
        prop_assert_eq!(a.values().shape(), g.shape());
        prop_assert!(ad.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..gd.len() {
            for j in 0..gd.len() {
                if gd[i].abs() <= gd[j].abs() {
                    prop_assert!(ad[i] >= ad[j]);
                }
            }
        }
        let top = (0..gd.len()).max_by(|&i, &j| gd[i].abs().total_cmp(&gd[j].abs())).unwrap();
        prop_assert_eq!(ad[top], ad.iter().copied().fold(f64::INFINITY, f64::min));
        let rescaled = iga_mask(&g.map(|v| v * 3.0), NormalizationKind::MinMax).unwrap();
        prop_assert!(rescaled.values().max_abs_diff(a.values()) < 1e-9);
    }

    #[test]
    fn sigmoid_mask_in_unit_range(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::from_fn(vec![3, 4, 4], |_| r.random_range(-50.0..50.0));
        let a = iga_mask(&g, NormalizationKind::Sigmoid).unwrap();
        prop_assert!(a.values().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn sobel_in_unit_range(seed in 0u64..10_000, h in 3usize..12, w in 3usize..12) {
        let m = sobel_mask(&image(&[3, h, w], seed)).unwrap();
        prop_assert_eq!(m.values().shape(), &[3, h, w]);
        prop_assert!(m.values().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ones_mask_is_bit_identical(seed in 0u64..10_000) {
        let x = image(&[3, 8, 8], seed);
        prop_assert_eq!(apply_attention(&x, &AttentionMask::ones(&[3, 8, 8])).unwrap(), x);
    }
}
