use agop_core::agop::{AgopDiagonal, AgopHook};
use agop_core::attribution::{attribute, AttributionSettings, Method};
use agop_core::data::{
    decode_dataset, encode_dataset, generate_dataset, Background, Scenario, ScenarioSpec, PIXELS,
};
use agop_core::metrics::{
    deletion_auc, deletion_curve, energy_gt, insertion_auc, insertion_curve, miou, pointing_game,
    random_miou,
};
use agop_core::model::{build_cnn8by8, Classifier};
use agop_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn pixels(lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, PIXELS)
}

fn mask_strategy() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), PIXELS)
        .prop_filter("non-empty mask", |m| m.iter().any(|&b| b))
}

fn scenario_strategy() -> impl Strategy<Value = Scenario> {
    prop::sample::select(Scenario::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rank_metrics_ignore_monotone_transforms(
        map in pixels(0.0, 1.0),
        mask in mask_strategy(),
        x in pixels(-2.0, 2.0),
        seed in 0u64..50,
    ) {
        let warped: Vec<f64> = map.iter().map(|v| (3.0 * v).exp() + 0.5).collect();
        prop_assert_eq!(pointing_game(&map, &mask).unwrap(), pointing_game(&warped, &mask).unwrap());
        prop_assert_eq!(miou(&map, &mask).unwrap(), miou(&warped, &mask).unwrap());
        let model = build_cnn8by8(seed);
        let base = vec![0.0; PIXELS];
        prop_assert_eq!(
            deletion_auc(&model, &x, &map, &base).unwrap(),
            deletion_auc(&model, &x, &warped, &base).unwrap()
        );
        prop_assert_eq!(
            insertion_auc(&model, &x, &map, &base).unwrap(),
            insertion_auc(&model, &x, &warped, &base).unwrap()
        );
    }

    #[test]
    fn miou_takes_values_in_the_closed_set(map in pixels(0.0, 1.0), mask in mask_strategy()) {
        let k = mask.iter().filter(|&&m| m).count();
        let v = miou(&map, &mask).unwrap();
        let hit = (0..=k).any(|i| (v - i as f64 / (2 * k - i) as f64).abs() < 1e-15);
        prop_assert!(hit, "{} not in value set for k={}", v, k);
    }

    #[test]
    fn deletion_mirrors_reversed_insertion(x in pixels(-2.0, 2.0), seed in 0u64..50) {
        let model = build_cnn8by8(seed);
        let base = vec![0.1; PIXELS];
        let order: Vec<usize> = (0..PIXELS).map(|i| (i * 37 + seed as usize) % PIXELS).collect();
        let reversed: Vec<usize> = order.iter().rev().copied().collect();
        let class = model.predict(&x).unwrap();
        let del = deletion_curve(&model, &x, &order, &base, class).unwrap();
        let ins = insertion_curve(&model, &x, &reversed, &base, class).unwrap();
        for j in 0..=PIXELS {
            prop_assert_eq!(del[j], ins[PIXELS - j]);
        }
    }

    #[test]
    fn backward_is_linear_in_the_output(x in pixels(-2.0, 2.0), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let model = build_cnn8by8(3);
        let (_, g0) = model.logits_and_input_gradient(&x, 0).unwrap();
        let (_, g1) = model.logits_and_input_gradient(&x, 1).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward_on_tape(&mut tape, &x).unwrap();
        let l0 = tape.select(fwd.logits, 0).unwrap();
        let l1 = tape.select(fwd.logits, 1).unwrap();
        let s0 = tape.scale(l0, a);
        let s1 = tape.scale(l1, b);
        let out = tape.add(s0, s1).unwrap();
        let grads = tape.backward(out).unwrap();
        for (i, g) in grads.wrt(fwd.input).data().iter().enumerate() {
            prop_assert!((g - (a * g0[i] + b * g1[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn every_method_is_non_negative(x in pixels(-2.0, 2.0), seed in 0u64..20) {
        let model = build_cnn8by8(seed);
        let diag = AgopDiagonal {
            values: (0..PIXELS).map(|i| (i % 5) as f64 + 0.5).collect(),
            n_acc: 1,
            step: 0,
            only_correct: false,
        };
        let settings = AttributionSettings { ig_steps: 8, smoothgrad_samples: 4, ..Default::default() };
        for method in Method::ALL {
            let map = attribute(method, &model, Some(&diag), &x, &settings, seed).unwrap();
            prop_assert_eq!(map.values.len(), PIXELS);
            prop_assert!(map.values.iter().all(|v| v.is_finite() && *v >= 0.0), "{}", method);
        }
    }

    #[test]
    fn agop_diagonal_is_non_negative_and_bounded(
        grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..20)
    ) {
        let mut hook = AgopHook::new(6, false);
        for g in &grads {
            hook.accumulate(g).unwrap();
        }
        let diag = hook.finalize(0).unwrap();
        for (j, v) in diag.values.iter().enumerate() {
            let max_sq = grads.iter().map(|g| g[j] * g[j]).fold(0.0, f64::max);
            prop_assert!(*v >= 0.0 && *v <= max_sq + 1e-12);
        }
    }

    #[test]
    fn datasets_are_balanced_and_round_trip(
        scenario in scenario_strategy(),
        correlated in any::<bool>(),
        half in 1usize..40,
        seed in any::<u64>(),
    ) {
        let background = if correlated { Background::Correlated } else { Background::Uncorrelated };
        let spec = ScenarioSpec::new(scenario, background, 2 * half, seed);
        let samples = generate_dataset(&spec).unwrap();
        prop_assert_eq!(samples.iter().filter(|s| s.label == 1).count(), half);
        for s in &samples {
            prop_assert_eq!(s.mask_popcount(), scenario.mask_size());
        }
        prop_assert_eq!(decode_dataset(&encode_dataset(&samples)).unwrap(), samples);
    }
}

#[test]
fn energy_is_not_rank_invariant() {
    let mut mask = vec![false; PIXELS];
    mask[..4].iter_mut().for_each(|m| *m = true);
    let map: Vec<f64> = (0..PIXELS)
        .map(|i| 1.0 + (PIXELS - i) as f64 / PIXELS as f64)
        .collect();
    let squared: Vec<f64> = map.iter().map(|v| v.powi(4)).collect();
    assert_eq!(miou(&map, &mask).unwrap(), miou(&squared, &mask).unwrap());
    assert_ne!(
        energy_gt(&map, &mask).unwrap(),
        energy_gt(&squared, &mask).unwrap()
    );
}

#[test]
fn random_expectation_for_eight_pixel_masks() {
    let e = random_miou(8, PIXELS);
    assert!(e > 0.06 && e < 0.08, "{e}");
}

#[test]
fn tensor_validation_names_the_axis() {
    let x = Tensor::zeros(&[2, 4, 4]);
    let k = Tensor::zeros(&[1, 3, 3, 3]);
    let b = Tensor::zeros(&[1]);
    let err = agop_core::tensor::ops::conv2d(&x, &k, &b, 0).unwrap_err();
    assert!(err.to_string().contains("in_channels"), "{err}");
}
