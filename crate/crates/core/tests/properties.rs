use nerveseg::autodiff::Tape;
use nerveseg::data::{generate_dataset, pgm, rle, GrayImage, Mask, SynthCfg};
use nerveseg::models::{count_params, Accounting, Arch, ModelGraph, ModelOptions};
use nerveseg::ops::{self, BatchNormCfg, Mode, Padding, RunningStats};
use nerveseg::tensor::Tensor;
use nerveseg::training::{adam_update, dice_coefficient, dice_similarity, AdamConfig};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (1usize..=64, 1usize..=64, 0u32..=100).prop_flat_map(|(h, w, density)| {
        proptest::collection::vec(proptest::bool::weighted(density as f64 / 100.0), h * w)
            .prop_map(move |bits| Mask::new(h, w, bits.into_iter().map(u8::from).collect()).unwrap())
    })
}

fn same_shape_masks() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        let bits = || proptest::collection::vec(0u8..=1, h * w);
        (bits(), bits()).prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
    })
}

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-10.0f64..10.0, shape.iter().product::<usize>())
        .prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

/// 4-connected components of the set pixels.
fn components(m: &Mask) -> usize {
    let mut seen = vec![false; m.data.len()];
    let mut count = 0;
    for start in 0..m.data.len() {
        if m.data[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / m.w, i % m.w);
            let mut push = |j: usize| {
                if m.data[j] == 1 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - m.w);
            }
            if y + 1 < m.h {
                push(i + m.w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < m.w {
                push(i + 1);
            }
        }
    }
    count
}

proptest! {
    #[test]
    fn rle_round_trip(m in mask_strategy()) {
        let text = rle::encode(&m);
        prop_assert_eq!(rle::decode(&text, m.h, m.w).unwrap(), m.clone());
        if m.count() == 0 {
            prop_assert!(text.is_empty());
        }
    }

    #[test]
    fn pgm_round_trip_on_quantized(
        (h, w, bytes) in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(any::<u8>(), h * w)))
    ) {
        let img = GrayImage::new(h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect()).unwrap();
        let encoded = pgm::encode(&img);
        prop_assert_eq!(&encoded[encoded.len() - h * w..], &bytes[..]);
        prop_assert_eq!(pgm::decode(&encoded).unwrap(), img);
    }

    #[test]
    fn dice_coefficient_is_symmetric((a, b) in same_shape_masks()) {
        let ab = dice_coefficient(&a, &b).unwrap();
        prop_assert_eq!(ab, dice_coefficient(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn dice_similarity_range(
        x in proptest::collection::vec(0.0f64..=1.0, 1..200),
        k in 0.01f64..10.0,
        seed in any::<u64>(),
    ) {
        let y: Vec<f64> = (0..x.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        let s = dice_similarity(&x, &y, k).unwrap();
        prop_assert!((0.0..1.0).contains(&s), "{}", s);
    }

    #[test]
    fn removing_a_true_positive_never_lowers_the_loss((x, y) in same_shape_masks(), k in 0.1f64..5.0) {
        let xf: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let yf: Vec<f64> = y.data.iter().map(|&v| v as f64).collect();
        let before = dice_similarity(&xf, &yf, k).unwrap();
        if let Some(i) = (0..xf.len()).find(|&i| xf[i] == 1.0 && yf[i] == 1.0) {
            let mut fewer = xf.clone();
            fewer[i] = 0.0;
            prop_assert!(dice_similarity(&fewer, &yf, k).unwrap() >= before);
        }
    }

    #[test]
    fn batchnorm_standardizes(x in tensor([3, 2, 4, 4])) {
        let spread = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-2);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let g = tape.constant(Tensor::ones([1, 2, 1, 1]));
        let b = tape.constant(Tensor::zeros([1, 2, 1, 1]));
        let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
        let cfg = BatchNormCfg { eps: 1e-10, momentum: 0.9 };
        let y = ops::batchnorm2d(&mut tape, xv, g, b, RunningStats { mean: &mut m, var: &mut v }, Mode::Train, cfg).unwrap();
        let y = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| (0..16).map(move |i| (n, i))).map(|(n, i)| y.get(n, c, i / 4, i % 4)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    // Non-negative inputs, as after a ReLU: with zero fill, a window whose
    // maximum is negative would re-pool onto one of the zeros.
    fn unpool_of_pool_is_idempotent(x in tensor([2, 3, 6, 4])) {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.map(f64::abs));
        let (p, idx) = ops::maxpool2x2(&mut tape, xv).unwrap();
        let u = ops::max_unpool2x2(&mut tape, p, &idx).unwrap();
        let (p2, idx2) = ops::maxpool2x2(&mut tape, u).unwrap();
        let u2 = ops::max_unpool2x2(&mut tape, p2, &idx2).unwrap();
        prop_assert_eq!(tape.value(u), tape.value(u2));
    }

    #[test]
    fn conv_with_unit_kernel_is_identity(x in tensor([2, 1, 5, 3])) {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let y = ops::conv2d(&mut tape, xv, w, Some(b), Padding::Same).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op(p0 in -5.0f64..5.0, steps in 1u64..50) {
        let (mut p, mut m, mut v) = ([p0], [0.0], [0.0]);
        for t in 1..=steps {
            adam_update(&AdamConfig::default(), t, &mut p, &[0.0], &mut m, &mut v);
        }
        prop_assert_eq!(p[0], p0);
    }
}

#[test]
fn generated_masks_have_at_most_one_component() {
    let cfg = SynthCfg { seed: 21, p_empty: 0.2, ..Default::default() };
    for s in generate_dataset(&cfg, 200).unwrap() {
        assert!(components(&s.mask) <= 1, "{}", s.id);
    }
}

#[test]
fn parameter_count_is_stable_across_training_passes() {
    let mut model = ModelGraph::<f32>::build(Arch::Resunet, ModelOptions::with_base_filters(2)).unwrap();
    let before = count_params(&model, Accounting::default());
    let x = Tensor::from_fn([2, 1, 16, 16], |i| (i % 5) as f32 / 5.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (y, _) = model.forward_on_tape(&mut tape, xv, Mode::Train).unwrap();
    let loss = ops::sum(&mut tape, y);
    tape.backward(loss).unwrap();
    assert_eq!(count_params(&model, Accounting::default()), before);
}
