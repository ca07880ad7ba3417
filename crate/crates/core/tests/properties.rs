mod common;

use focusnet_core::autodiff::{Mode, Padding, RunningStats, Tape};
use focusnet_core::data::augment::{apply, hflip, vflip};
use focusnet_core::data::{compute_stats, normalize, resize, split, synth_generate, AugmentParams, AugmentationConfig, DatasetManifest};
use focusnet_core::metrics::{binarize, confusion, metrics_from_confusion, BinaryMask};
use focusnet_core::train::{dice_value, PlateauState};
use focusnet_core::{RngState, Tensor};
use proptest::prelude::*;

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, padding: Padding) -> Tensor<f64> {
    let mut tape = Tape::no_grad();
    let o = w.shape()[0];
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(Tensor::zeros(&[o])));
    tape.conv2d(&xv, &wv, &bv, s, padding).unwrap().value().clone()
}

fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let mut tape = Tape::no_grad();
    let o = w.shape()[1];
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(Tensor::zeros(&[o])));
    tape.conv2d_transpose(&xv, &wv, &bv, s).unwrap().value().clone()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn mask_of(t: &Tensor<f32>) -> Vec<bool> {
    t.data().iter().map(|&v| v == 1.0).collect()
}

fn is_binary(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut r = common::rng(seed);
        let cs = common::random_case(&mut r, false);
        let pad = if cs.same { Padding::Same } else { Padding::Valid };
        let xs = [cs.n, cs.c, cs.h, cs.w];
        let x = t64(&xs, common::uniform(&mut r, xs.iter().product()));
        let y = t64(&xs, common::uniform(&mut r, xs.iter().product()));
        let w = t64(&[cs.o, cs.c, cs.k, cs.k], common::uniform(&mut r, cs.o * cs.c * cs.k * cs.k));
        let mix = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
        let lhs = conv(&mix, &w, cs.s, pad);
        let rhs = conv(&x, &w, cs.s, pad).zip_map(&conv(&y, &w, cs.s, pad), |a, b| alpha * a + beta * b).unwrap();
        let scale = rhs.max_abs().max(1.0);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
        }
    }

    /// <conv(x), y> == <x, conv_t(y)> when the transpose undoes a same-padded stride.
    #[test]
    fn transpose_is_adjoint_of_conv(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let cs = common::random_case(&mut r, true);
        let xs = [cs.n, cs.c, cs.h * cs.s, cs.w * cs.s];
        let x = t64(&xs, common::uniform(&mut r, xs.iter().product()));
        let w = t64(&[cs.o, cs.c, cs.k, cs.k], common::uniform(&mut r, cs.o * cs.c * cs.k * cs.k));
        let y = t64(&[cs.n, cs.o, cs.h, cs.w], common::uniform(&mut r, cs.n * cs.o * cs.h * cs.w));
        let cx = conv(&x, &w, cs.s, Padding::Same);
        prop_assert_eq!(cx.shape(), y.shape());
        let lhs = dot(&cx, &y);
        let rhs = dot(&x, &conv_t(&y, &w, cs.s));
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn batchnorm_train_standardizes(seed in any::<u64>(), shift in -3.0f64..3.0, spread in 0.6f64..4.0) {
        let mut r = common::rng(seed);
        let shape = [2, 3, 5, 5];
        let x = t64(&shape, common::uniform(&mut r, 150).into_iter().map(|v| shift + spread * v).collect());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        let y = tape.batchnorm2d(&xv, &g, &b, &mut stats, Mode::Train, 1e-5, 0.1).unwrap();
        let channel = |t: &Tensor<f64>, c: usize| -> (f64, f64) {
            let vals: Vec<f64> = (0..2).flat_map(|n| t.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 50.0;
            (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0)
        };
        for c in 0..3 {
            let (mean, var) = channel(y.value(), c);
            let (_, input_var) = channel(&x, c);
            prop_assert!(mean.abs() < 1e-9);
            let expect = input_var / (input_var + 1e-5);
            prop_assert!((var - expect).abs() < 1e-9, "var {var} vs {expect}");
        }
    }

    #[test]
    fn activations_stay_in_range(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let x = t64(&[64], common::uniform(&mut r, 64).into_iter().map(|v| 40.0 * v).collect());
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        prop_assert!(tape.sigmoid(&xv).value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(tape.relu(&xv).value().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dropout_replays_with_the_same_seed(seed in any::<u64>(), rate in 0.0f64..0.9) {
        let x = Tensor::<f32>::ones(&[2, 3, 4, 4]);
        let run = || {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            tape.dropout(&xv, rate, Mode::Train, &mut RngState::new(seed)).unwrap().value().clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn metric_identities(seed in any::<u64>(), density in 0.0f64..1.0) {
        let mut r = RngState::new(seed);
        let pred: Vec<bool> = (0..100).map(|_| r.bernoulli(density)).collect();
        let gt: Vec<bool> = (0..100).map(|_| r.bernoulli(0.5)).collect();
        let c = confusion(&BinaryMask::new(&[100], pred).unwrap(), &BinaryMask::new(&[100], gt).unwrap()).unwrap();
        prop_assert_eq!(c.total(), 100);
        let m = metrics_from_confusion(&c).unwrap().values;
        prop_assert!((m.di - 2.0 * m.ji / (1.0 + m.ji)).abs() < 1e-12);
        prop_assert!(m.ji <= m.se && m.ji <= m.di);
        for v in [m.se, m.sp, m.ac, m.ji, m.di] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn binarize_matches_strict_threshold(seed in any::<u64>(), threshold in 0.01f64..0.99) {
        let mut r = RngState::new(seed);
        let p = Tensor::<f32>::from_fn(&[1, 1, 6, 6], |_| r.uniform() as f32);
        let m = binarize(&p, threshold).unwrap();
        for (b, &v) in m.data().iter().zip(p.data()) {
            prop_assert_eq!(*b, f64::from(v) > threshold);
        }
    }

    #[test]
    fn dice_loss_in_unit_interval(seed in any::<u64>(), smooth in 0.01f64..10.0) {
        let mut r = RngState::new(seed);
        let p = Tensor::<f64>::from_fn(&[2, 1, 5, 5], |_| r.uniform_range(1e-6, 1.0 - 1e-6));
        let g = Tensor::<f64>::from_fn(&[2, 1, 5, 5], |_| if r.bernoulli(0.3) { 1.0 } else { 0.0 });
        let l = dice_value(&p, &g, smooth).unwrap();
        prop_assert!((0.0..1.0).contains(&l));
        prop_assert_eq!(dice_value(&g, &g, smooth).unwrap(), 0.0);
    }

    #[test]
    fn plateau_rate_never_rises(losses in prop::collection::vec(0.0f64..1.0, 1..60)) {
        let mut p = PlateauState::new(1e-3);
        let mut lr = p.lr;
        for l in losses {
            let changed = p.update(l);
            prop_assert!(p.lr == lr || (changed && p.lr == lr * 0.5));
            lr = p.lr;
        }
    }

    #[test]
    fn double_flips_are_identity(seed in any::<u64>(), size in 16usize..24, channels in prop::sample::select(vec![1usize, 3])) {
        let s = synth_generate(1, size, channels, &mut RngState::new(seed)).unwrap().samples.remove(0);
        prop_assert_eq!(&hflip(&hflip(&s)), &s);
        prop_assert_eq!(&vflip(&vflip(&s)), &s);
    }

    #[test]
    fn augmentation_preserves_mask_binarity_and_size(seed in any::<u64>(), channels in prop::sample::select(vec![1usize, 3])) {
        let s = synth_generate(1, 20, channels, &mut RngState::new(seed)).unwrap().samples.remove(0);
        let cfg = AugmentationConfig { channel_shift_fraction: 1.0, ..Default::default() };
        let mut r = RngState::new(seed ^ 1);
        for _ in 0..4 {
            let p = AugmentParams::draw(&cfg, channels, &mut r);
            let a = apply(&s, &p).unwrap();
            prop_assert!(is_binary(&a.mask));
            prop_assert_eq!((a.height(), a.width()), (s.height(), s.width()));
        }
        prop_assert_eq!(&apply(&s, &AugmentParams::identity()).unwrap(), &s);
        let small = resize(&s, 16).unwrap();
        prop_assert!(is_binary(&small.mask));
        prop_assert_eq!((small.height(), small.width(), small.mask.shape()[1]), (16, 16, 16));
    }

    #[test]
    fn split_is_a_partition(n in 2usize..40, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let m = synth_generate(n, 16, 1, &mut RngState::new(seed)).unwrap();
        let (a, b) = split(&m, fraction, seed).unwrap();
        prop_assert!(!a.is_empty() && !b.is_empty());
        let mut ids: Vec<&str> = a.samples.iter().chain(&b.samples).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(a.len() + b.len(), n);
    }

    #[test]
    fn normalization_is_self_consistent(seed in any::<u64>(), channels in prop::sample::select(vec![1usize, 3])) {
        let m = synth_generate(3, 16, channels, &mut RngState::new(seed)).unwrap();
        let stats = compute_stats(&m.samples).unwrap();
        let normed: Vec<_> = m.samples.iter().map(|s| normalize(s, &stats).unwrap()).collect();
        let again = compute_stats(&normed).unwrap();
        for c in 0..channels {
            prop_assert!(again.mean[c].abs() < 1e-5, "mean {}", again.mean[c]);
            prop_assert!((again.std[c] - 1.0).abs() < 1e-5, "std {}", again.std[c]);
        }
        for (s, n) in m.samples.iter().zip(&normed) {
            prop_assert_eq!(mask_of(&s.mask), mask_of(&n.mask));
        }
    }
}

#[test]
fn manifest_rejects_duplicate_ids() {
    let m = synth_generate(2, 16, 1, &mut RngState::new(0)).unwrap();
    let dup = vec![m.samples[0].clone(), m.samples[0].clone()];
    assert!(DatasetManifest::new(dup, "dup").is_err());
}
