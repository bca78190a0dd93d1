//! Finite-difference gradient checks shared by the test targets.
#![allow(dead_code)]

use agop_core::model::Classifier;
use agop_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

/// Component-wise relative error; magnitudes below `floor` are compared on
/// the scale of `floor`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduce a graph output to a scalar with a fixed random projection.
fn project(tape: &mut Tape, out: Var, weights: &[f64]) -> Var {
    let w = tape.leaf(Tensor::new(vec![1, weights.len()], weights.to_vec()).unwrap());
    let b = tape.leaf(Tensor::zeros(&[1]));
    let y = tape.dense(out, w, b).unwrap();
    tape.select(y, 0).unwrap()
}

/// Worst relative error of d(out)/d(inputs[which]), `build` mapping leaves
/// to a scalar.
pub fn check_operand(
    inputs: &[Tensor],
    which: usize,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[Tensor]| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let value = tape.value(out).item().unwrap();
        let grads = tape.backward(out).unwrap();
        (value, grads.wrt(vars[which]).data().to_vec())
    };
    let (_, analytic) = eval(inputs);
    let numeric: Vec<f64> = (0..inputs[which].len())
        .map(|i| {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= EPS;
            (eval(&plus).0 - eval(&minus).0) / (2.0 * EPS)
        })
        .collect();
    max_rel_error(&analytic, &numeric, 1e-3)
}

/// Worst error per primitive over every operand.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut conv = 0.0f64;
    for pad in [0, 1] {
        let inputs = vec![
            random_tensor(&mut rng, &[2, 5, 5]),
            random_tensor(&mut rng, &[3, 2, 3, 3]),
            random_tensor(&mut rng, &[3]),
        ];
        let side = 5 + 2 * pad - 2;
        let proj: Vec<f64> = (0..3 * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let build = move |tape: &mut Tape, v: &[Var]| {
            let y = tape.conv2d(v[0], v[1], v[2], pad).unwrap();
            project(tape, y, &proj)
        };
        for which in 0..3 {
            conv = conv.max(check_operand(&inputs, which, &build));
        }
    }
    out.push(("conv2d", conv));

    let mut pool = 0.0f64;
    let inputs = vec![random_tensor(&mut rng, &[2, 6, 6])];
    for (k, stride) in [(2, 2), (2, 1), (3, 1)] {
        let side = (6 - k) / stride + 1;
        let proj: Vec<f64> = (0..2 * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let build = move |tape: &mut Tape, v: &[Var]| {
            let y = tape.maxpool2d(v[0], k, stride).unwrap();
            project(tape, y, &proj)
        };
        pool = pool.max(check_operand(&inputs, 0, &build));
    }
    out.push(("maxpool2d", pool));

    let proj: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build = move |tape: &mut Tape, v: &[Var]| {
        let y = tape.relu(v[0]);
        project(tape, y, &proj)
    };
    out.push(("relu", check_operand(&inputs, 0, &build)));

    let inputs = vec![
        random_tensor(&mut rng, &[6]),
        random_tensor(&mut rng, &[3, 6]),
        random_tensor(&mut rng, &[3]),
    ];
    let proj: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build = move |tape: &mut Tape, v: &[Var]| {
        let y = tape.dense(v[0], v[1], v[2]).unwrap();
        project(tape, y, &proj)
    };
    out.push((
        "dense",
        (0..3)
            .map(|w| check_operand(&inputs, w, &build))
            .fold(0.0, f64::max),
    ));

    let mut ce = 0.0f64;
    for label in 0..3 {
        let build = move |tape: &mut Tape, v: &[Var]| {
            let y = tape.dense(v[0], v[1], v[2]).unwrap();
            tape.cross_entropy(y, label).unwrap()
        };
        ce = ce.max(check_operand(&inputs, 0, &build));
    }
    out.push(("cross_entropy", ce));

    let inputs = vec![random_tensor(&mut rng, &[4]), random_tensor(&mut rng, &[4])];
    let build = |tape: &mut Tape, v: &[Var]| {
        let a = tape.scale(v[0], -2.5);
        let s = tape.add(a, v[1]).unwrap();
        let t = tape.add(s, v[0]).unwrap();
        tape.sum(t)
    };
    out.push((
        "scale/add/sum",
        (0..2)
            .map(|w| check_operand(&inputs, w, &build))
            .fold(0.0, f64::max),
    ));
    out
}

/// Worst relative error of both logits' input-gradients over `inputs`.
pub fn classifier_input_error<M: Classifier + ?Sized>(model: &M, inputs: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for x in inputs {
        for class in 0..2 {
            let (_, analytic) = model.logits_and_input_gradient(x, class).unwrap();
            let numeric: Vec<f64> = (0..x.len())
                .map(|i| {
                    let mut plus = x.clone();
                    plus[i] += EPS;
                    let mut minus = x.clone();
                    minus[i] -= EPS;
                    (model.logits(&plus).unwrap()[class] - model.logits(&minus).unwrap()[class])
                        / (2.0 * EPS)
                })
                .collect();
            worst = worst.max(max_rel_error(&analytic, &numeric, 1e-3));
        }
    }
    worst
}
