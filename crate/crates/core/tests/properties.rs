use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sesn::autodiff::Tape;
use sesn::model::{Classifier, ClassifierConfig};
use sesn::scaleconv::shift_scale;
use sesn::{conv_h_h, conv_t_h, BasisSpec, FeatureMapH, Padding, RunConfig, ScaleConvLayer, ScaleGrid, SteerableBasis, Tensor};

fn roll_spatial(t: &Tensor<f64>, dy: usize, dx: usize) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Tensor::from_fn(&shape, |i| {
        let (plane, y, x) = (i / (h * w), i / w % h, i % w);
        t.data()[plane * h * w + (y + h - dy) % h * w + (x + w - dx) % w]
    })
}

fn basis(levels: usize, v: usize, sigma0: f64, base: f64) -> Arc<SteerableBasis> {
    let spec = BasisSpec { num_functions: 6, filter_size: v, scale_grid: ScaleGrid::new(base, levels).unwrap(), sigma0, max_order: 2 };
    Arc::new(SteerableBasis::build(spec).unwrap())
}

fn noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Levels `0..keep` of a `[N, C, S, U, U]` tensor.
fn leading_levels(t: &Tensor<f64>, keep: usize) -> Tensor<f64> {
    let [n, c, s, h, w] = t.shape().try_into().unwrap();
    Tensor::from_fn(&[n, c, keep, h, w], |i| {
        let (nc, rest) = (i / (keep * h * w), i % (keep * h * w));
        t.data()[nc * s * h * w + rest]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lifting_commutes_with_cyclic_translation(
        seed in any::<u64>(), levels in 1usize..4, u in 5usize..12, v in prop::sample::select(vec![3usize, 5, 7]),
        dy in 0usize..12, dx in 0usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = ScaleConvLayer::random(2, 3, 1, basis(levels, v, 1.0, sesn::DEFAULT_BASE), true, Padding::Circular, &mut rng).unwrap();
        let f = noise(&[2, 2, u, u], &mut rng);
        let (dy, dx) = (dy % u, dx % u);
        let a = conv_t_h(&roll_spatial(&f, dy, dx), &layer).unwrap();
        let b = roll_spatial(conv_t_h(&f, &layer).unwrap().data(), dy, dx);
        prop_assert!(a.data().rel_l2_error(&b).unwrap() < 1e-12);
    }

    #[test]
    fn group_convolution_commutes_with_cyclic_translation(
        seed in any::<u64>(), levels in 2usize..5, k_s in 1usize..3, u in 5usize..12, dy in 0usize..12, dx in 0usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = basis(levels, 5, 0.9, sesn::DEFAULT_BASE);
        let layer = ScaleConvLayer::random(2, 2, k_s.min(levels), b, false, Padding::Circular, &mut rng).unwrap();
        let grid = layer.grid().clone();
        let f = noise(&[1, 2, levels, u, u], &mut rng);
        let (dy, dx) = (dy % u, dx % u);
        let a = conv_h_h(&FeatureMapH::new(roll_spatial(&f, dy, dx), grid.clone()).unwrap(), &layer).unwrap();
        let b = roll_spatial(conv_h_h(&FeatureMapH::new(f, grid).unwrap(), &layer).unwrap().data(), dy, dx);
        prop_assert!(a.data().rel_l2_error(&b).unwrap() < 1e-12);
    }

    #[test]
    fn co_shifted_basis_matches_level_shift(
        seed in any::<u64>(), levels in 2usize..5, sigma0 in 0.6f64..1.4, base in prop::sample::select(vec![sesn::DEFAULT_BASE, std::f64::consts::SQRT_2, 2.0]),
    ) {
        // level l of the basis started at sigma0 * a is level l + 1 of the
        // original one, up to the ratio of the amplitudes
        let coarse = basis(levels, 9, sigma0, base);
        let fine = basis(levels + 1, 9, sigma0 / base, base);
        let ratio = coarse.amplitude() / fine.amplitude();
        for i in 0..coarse.num_functions() {
            for l in 0..levels {
                for (p, q) in coarse.slice(i, l).iter().zip(fine.slice(i, l + 1)) {
                    prop_assert!((p - ratio * q).abs() <= 1e-12 * p.abs().max(1e-300) + 1e-14);
                }
            }
        }

        // a layer on the co-shifted basis applied to the level-shifted signal
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = ScaleConvLayer::random(2, 2, 1, fine.clone(), false, Padding::Zero, &mut rng).unwrap();
        let shifted_layer = ScaleConvLayer::new(layer.weights().clone(), None, coarse.clone(), Padding::Zero).unwrap();
        let f = noise(&[1, 2, levels + 1, 8, 8], &mut rng);
        let out = conv_h_h(&FeatureMapH::new(f.clone(), fine.spec().scale_grid.clone()).unwrap(), &layer).unwrap();
        let moved = leading_levels(&shift_scale(&f, -1).unwrap(), levels);
        let lhs = conv_h_h(&FeatureMapH::new(moved, coarse.spec().scale_grid.clone()).unwrap(), &shifted_layer).unwrap();
        let rhs = leading_levels(&shift_scale(out.data(), -1).unwrap(), levels).scale(ratio);
        prop_assert!(lhs.data().rel_l2_error(&rhs).unwrap() < 1e-12);
    }
}

fn scalar_model(seed: u64) -> Classifier<f64> {
    let mut run = RunConfig::default();
    for (k, v) in [("variant", "scalar"), ("widths", "3,4,5"), ("hidden", "8"), ("n_scales", "3"), ("filter_size", "5"), ("n_basis", "6"), ("max_order", "2")] {
        run.set(k, v).unwrap();
    }
    Classifier::new(ClassifierConfig::from_run(&run).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn scalar_logits_ignore_cyclic_roll_of_first_layer_scales() {
    let model = scalar_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = noise(&[2, 1, 16, 16], &mut rng);
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let xv = tape.constant(x);
    let first = model.first_layer(&mut tape, xv, &vars).unwrap();
    let base = model.from_first_layer(&mut tape, first, &vars).unwrap();
    let base = tape.value(base).clone();
    let h = tape.value(first).clone();
    let [n, c, s, u, w] = h.shape().try_into().unwrap();
    for roll in 1..s {
        let rolled = Tensor::from_fn(&[n, c, s, u, w], |i| {
            let (outer, level, pix) = (i / (s * u * w), i / (u * w) % s, i % (u * w));
            h.data()[(outer * s + (level + roll) % s) * u * w + pix]
        });
        let rv = tape.constant(rolled);
        let logits = model.from_first_layer(&mut tape, rv, &vars).unwrap();
        assert_eq!(tape.value(logits), &base, "roll by {roll}");
    }
}

#[test]
fn logits_are_finite_and_repeatable() {
    let model = scalar_model(6);
    let x = noise(&[1, 1, 16, 16], &mut ChaCha8Rng::seed_from_u64(7));
    let logits = model.logits(x.clone()).unwrap();
    assert!(logits.is_finite());
    assert_eq!(logits.shape(), [1, 10]);
    assert_eq!(model.logits(x).unwrap(), logits);
}
