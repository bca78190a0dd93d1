//! End-to-end acceptance run: trains the benchmark models for three seeds
//! and prints one PASS/FAIL line per criterion. Exits non-zero if any fail.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use agop_core::agop::{posthoc_diag, AgopDiagonal, AgopHook};
use agop_core::attribution::{
    agop_local, integrated_gradients_signed, random_baseline, vanilla_grad, Method,
};
use agop_core::data::{
    generate_dataset, pixel_mean, Background, Sample, Scenario, ScenarioSpec, Split, PIXELS,
};
use agop_core::metrics::{
    evaluate_suite, fixed_map_miou, merge_records, miou, moving_average, pointing_game,
    random_miou, random_pointing_game, EvalRecord, SuiteConfig,
};
use agop_core::model::{build_cnn8by8, Classifier, Cnn8by8};
use agop_core::train::{train, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const N_TRAIN: usize = 4000;
const N_TEST: usize = 2000;

/// Methods whose maps come from input-gradients of the predicted logit.
const GRADIENT_METHODS: [Method; 5] = [
    Method::VanillaGrad,
    Method::IntegratedGradients,
    Method::SmoothGrad,
    Method::AgopLocal,
    Method::AgopWeighted,
];

struct Run {
    seed: u64,
    model: Cnn8by8,
    snapshots: Vec<AgopDiagonal>,
    outcome: TrainOutcome,
    train_set: Vec<Sample>,
    test_set: Vec<Sample>,
    records: Vec<EvalRecord>,
}

fn datasets(scenario: Scenario, background: Background, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let spec = ScenarioSpec::new(scenario, background, N_TRAIN, seed);
    let train_set = generate_dataset(&spec).unwrap();
    let test_set = generate_dataset(&ScenarioSpec {
        n: N_TEST,
        ..spec.with_split(Split::Test)
    })
    .unwrap();
    (train_set, test_set)
}

fn pipeline(scenario: Scenario, background: Background, seed: u64) -> Run {
    let start = Instant::now();
    let (train_set, test_set) = datasets(scenario, background, seed);
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut model = build_cnn8by8(seed);
    let mut hook = AgopHook::new(PIXELS, config.only_correct);
    let outcome = train(&mut model, &train_set, &test_set, &config, Some(&mut hook)).unwrap();
    let snapshots = hook.snapshots().to_vec();
    let diag = hook.finalize(outcome.steps).unwrap();
    let suite = SuiteConfig {
        scenario,
        background,
        seed,
        settings: Default::default(),
        baseline: pixel_mean(&train_set).unwrap().to_vec(),
    };
    let records = evaluate_suite(&model, Some(&diag), &test_set, &Method::ALL, &suite).unwrap();
    eprintln!(
        "  {scenario}/{background} seed {seed}: test acc {:.4}, {:.1}s",
        outcome.final_test_acc(),
        start.elapsed().as_secs_f64()
    );
    Run {
        seed,
        model,
        snapshots,
        outcome,
        train_set,
        test_set,
        records,
    }
}

fn merged(runs: &[Run], method: Method) -> EvalRecord {
    let rows: Vec<EvalRecord> = runs
        .iter()
        .map(|r| {
            r.records
                .iter()
                .find(|x| x.method == method)
                .unwrap()
                .clone()
        })
        .collect();
    merge_records(&rows).unwrap()
}

struct Verdicts {
    failures: usize,
}

impl Verdicts {
    fn report(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        let status = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} [{name}]: {status} ({detail})");
    }
}

fn test_inputs(run: &Run, n: usize) -> Vec<Vec<f64>> {
    run.test_set
        .iter()
        .take(n)
        .map(|s| s.image.to_vec())
        .collect()
}

fn criterion_gradients(v: &mut Verdicts, linear: &Run) {
    let primitives = common::primitive_errors(17);
    let worst_primitive = primitives.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut inputs = test_inputs(linear, 10);
    inputs.extend((0..10).map(|_| (0..PIXELS).map(|_| rng.random_range(-2.0..2.0)).collect()));
    let cnn = common::classifier_input_error(&linear.model, &inputs);
    v.report(
        1,
        "gradient correctness",
        cnn < 1e-4 && worst_primitive < 1e-6,
        format!("cnn max rel err {cnn:.2e} < 1e-4; primitives max {worst_primitive:.2e} < 1e-6"),
    );
}

fn criterion_hook_oracle(v: &mut Verdicts, linear: &Run) {
    let mut hook = AgopHook::new(PIXELS, true);
    for chunk in linear.train_set.chunks(32) {
        let batch: Vec<(&[f64], usize)> = chunk.iter().map(|s| (&s.image[..], s.label)).collect();
        hook.observe(&linear.model, &batch).unwrap();
    }
    let streamed = hook.finalize(0).unwrap();
    let oracle = posthoc_diag(&linear.model, &linear.train_set, true).unwrap();
    let diff = streamed
        .values
        .iter()
        .zip(&oracle.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    v.report(
        2,
        "hook oracle equivalence",
        diff <= 1e-12 && streamed.n_acc == oracle.n_acc,
        format!(
            "max abs diff {diff:.2e}, n_acc {} vs {}",
            streamed.n_acc, oracle.n_acc
        ),
    );
}

fn criterion_non_interference(v: &mut Verdicts, linear: &Run) {
    let config = TrainConfig {
        seed: linear.seed,
        ..TrainConfig::default()
    };
    let mut model = build_cnn8by8(linear.seed);
    let outcome = train(
        &mut model,
        &linear.train_set,
        &linear.test_set,
        &config,
        None,
    )
    .unwrap();
    let same_digest = outcome.trajectory_digest == linear.outcome.trajectory_digest;
    let same_params = model
        .flat_params()
        .iter()
        .zip(linear.model.flat_params())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    v.report(
        3,
        "hook non-interference",
        same_digest && same_params,
        format!(
            "{} steps, trajectory digests {}, final params {}",
            outcome.steps,
            if same_digest { "equal" } else { "differ" },
            if same_params {
                "bit-identical"
            } else {
                "differ"
            }
        ),
    );
}

fn criterion_local_equals_vanilla(v: &mut Verdicts, linear: &[Run]) {
    let mut diff = 0.0f64;
    for x in test_inputs(&linear[0], 100) {
        let a = vanilla_grad(&linear[0].model, &x).unwrap();
        let b = agop_local(&linear[0].model, &x).unwrap();
        for (p, q) in a.values.iter().zip(&b.values) {
            diff = diff.max((p - q).abs());
        }
    }
    let rows_equal = linear.iter().all(|run| {
        let find = |m| run.records.iter().find(|r| r.method == m).unwrap();
        let (a, b) = (find(Method::VanillaGrad), find(Method::AgopLocal));
        a.pg == b.pg
            && a.miou == b.miou
            && a.energy_gt == b.energy_gt
            && a.deletion_auc == b.deletion_auc
            && a.insertion_auc == b.insertion_auc
    });
    v.report(
        4,
        "AGOP-Local equals VanillaGrad",
        diff <= 1e-12 && rows_equal,
        format!(
            "max map diff {diff:.2e} over 100 inputs; metric rows {}",
            if rows_equal { "identical" } else { "differ" }
        ),
    );
}

fn criterion_completeness(v: &mut Verdicts, linear: &Run) {
    let zero = vec![0.0; PIXELS];
    let mut worst = 0.0f64;
    for x in test_inputs(linear, 50) {
        let (class, attr) = integrated_gradients_signed(&linear.model, &x, &zero, 300).unwrap();
        let gap =
            linear.model.logits(&x).unwrap()[class] - linear.model.logits(&zero).unwrap()[class];
        let total: f64 = attr.iter().sum();
        worst = worst.max((total - gap).abs() / gap.abs().max(1e-12));
    }
    v.report(
        5,
        "IG completeness",
        worst <= 0.01,
        format!("max relative gap {worst:.2e} at T=300 over 50 inputs"),
    );
}

fn criterion_linear(v: &mut Verdicts, linear: &[Run], elapsed: Duration) {
    let weighted = merged(linear, Method::AgopWeighted).miou;
    let vanilla = merged(linear, Method::VanillaGrad).miou;
    let random = merged(linear, Method::Random).miou;
    let weakest = GRADIENT_METHODS
        .iter()
        .map(|&m| (m, merged(linear, m).miou))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let min_acc = linear
        .iter()
        .map(|r| r.outcome.final_test_acc())
        .fold(1.0, f64::min);
    let pass = weighted >= 1.15 * vanilla
        && weakest.1 >= 2.0 * random
        && min_acc >= 0.75
        && elapsed < Duration::from_secs(15 * 60);
    v.report(
        6,
        "linear ordering",
        pass,
        format!(
            "AGOP-Weighted {weighted:.3} vs 1.15 x VanillaGrad {:.3}; weakest gradient method {} {:.3} vs 2 x random {:.3}; min test acc {min_acc:.4}; {:.0}s",
            1.15 * vanilla,
            weakest.0,
            weakest.1,
            2.0 * random,
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_multiplicative(v: &mut Verdicts, runs: &[Run]) {
    let global = merged(runs, Method::AgopGlobal).miou;
    let ig = merged(runs, Method::IntegratedGradients).miou;
    let random = merged(runs, Method::Random).miou;
    v.report(
        7,
        "multiplicative ordering",
        global >= 2.0 * ig && (ig - random).abs() <= 0.08,
        format!(
            "AGOP-Global {global:.3} vs 2 x IG {:.3}; |IG - random| = {:.3}",
            2.0 * ig,
            (ig - random).abs()
        ),
    );
}

fn criterion_transrot(v: &mut Verdicts, runs: &[Run]) {
    let ig_pg = merged(runs, Method::IntegratedGradients).pg;
    let global = merged(runs, Method::AgopGlobal);
    let random = merged(runs, Method::Random).miou;
    v.report(
        8,
        "translations+rotations ordering",
        ig_pg >= 0.8 && global.pg <= 0.2 && (global.miou - random).abs() <= 0.05,
        format!(
            "PG(IG) {ig_pg:.3}; PG(AGOP-Global) {:.3}; mIoU(AGOP-Global) {:.3} vs random {random:.3}",
            global.pg, global.miou
        ),
    );
}

fn criterion_xor(v: &mut Verdicts, runs: &[Run]) {
    let rows: Vec<EvalRecord> = Method::ALL.iter().map(|&m| merged(runs, m)).collect();
    let raw = rows
        .iter()
        .max_by(|a, b| a.miou.total_cmp(&b.miou))
        .unwrap();
    let centered = rows
        .iter()
        .max_by(|a, b| a.miou_centered().total_cmp(&b.miou_centered()))
        .unwrap();
    v.report(
        9,
        "XOR failure mode",
        raw.miou <= 0.10 && centered.miou_centered() <= 0.05,
        format!(
            "max raw mIoU {:.3} ({}); max centered mIoU {:.3} ({})",
            raw.miou,
            raw.method,
            centered.miou_centered(),
            centered.method
        ),
    );
}

fn criterion_convergence(v: &mut Verdicts, linear: &[Run]) {
    let mut pass = true;
    let mut details = Vec::new();
    for run in linear {
        let series: Vec<f64> = run
            .snapshots
            .iter()
            .map(|s| fixed_map_miou(&s.values, &run.test_set).unwrap())
            .collect();
        let half = run.outcome.steps / 2;
        let mid = run
            .snapshots
            .iter()
            .enumerate()
            .min_by_key(|(_, s)| s.step.abs_diff(half))
            .map(|(i, _)| i)
            .unwrap();
        let last = *series.last().unwrap();
        // Smoothed point j averages snapshots j..j+2; keep those ending in
        // the final third.
        let smooth = moving_average(&series, 3);
        let start = (2 * series.len() / 3).saturating_sub(2);
        let tail = &smooth[start.min(smooth.len() - 1)..];
        let monotone = tail.windows(2).all(|w| w[1] >= w[0] - 1e-12);
        pass &= last >= series[mid] && monotone;
        details.push(format!(
            "seed {}: mid {:.3} final {last:.3} tail {}",
            run.seed,
            series[mid],
            if monotone {
                "non-decreasing"
            } else {
                "decreases"
            }
        ));
    }
    v.report(10, "diag convergence", pass, details.join("; "));
}

fn criterion_gradcam(v: &mut Verdicts, linear: &[Run]) {
    let cam = merged(linear, Method::GradCam).pg;
    let pp = merged(linear, Method::GradCamPp).pg;
    v.report(
        11,
        "GradCAM resolution collapse",
        cam <= 0.05 && pp <= 0.05,
        format!("PG GradCAM {cam:.3}, GradCAM++ {pp:.3}"),
    );
}

fn criterion_cost(v: &mut Verdicts, linear: &[Run]) {
    let global = merged(linear, Method::AgopGlobal).ms_per_sample;
    let vanilla = merged(linear, Method::VanillaGrad).ms_per_sample;
    let ig = merged(linear, Method::IntegratedGradients).ms_per_sample;
    v.report(
        12,
        "cost ordering",
        global < 0.1 * vanilla && vanilla < ig && ig >= 10.0 * vanilla,
        format!("ms/sample AGOP-Global {global:.5}, VanillaGrad {vanilla:.4}, IG {ig:.3}"),
    );
}

fn criterion_closed_forms(v: &mut Verdicts, linear: &[Run]) {
    let samples = &linear[0].test_set;
    let trials = 5000;
    let (mut pg, mut iou) = (0.0, 0.0);
    for t in 0..trials {
        let map = random_baseline(1_000 + t as u64);
        let mask = &samples[t % samples.len()].mask;
        pg += f64::from(u8::from(pointing_game(&map.values, mask).unwrap()));
        iou += miou(&map.values, mask).unwrap();
    }
    let (pg, iou) = (pg / trials as f64, iou / trials as f64);
    let expected_pg = random_pointing_game(4, PIXELS);
    let expected_miou = random_miou(4, PIXELS);
    let random = merged(linear, Method::Random);
    let gap = (random.deletion_auc - random.insertion_auc).abs();
    v.report(
        13,
        "metric closed forms",
        (pg - expected_pg).abs() <= 0.01 && (iou - expected_miou).abs() <= 0.005 && gap <= 0.05,
        format!(
            "PG {pg:.4} vs {expected_pg:.4}; mIoU {iou:.4} vs {expected_miou:.4}; random del {:.3} ins {:.3}",
            random.deletion_auc, random.insertion_auc
        ),
    );
}

fn criterion_correlated(v: &mut Verdicts, runs: &[Run]) {
    let accs: Vec<f64> = runs.iter().map(|r| r.outcome.final_test_acc()).collect();
    let worst = Method::ALL
        .iter()
        .map(|&m| merged(runs, m))
        .max_by(|a, b| a.miou_centered().total_cmp(&b.miou_centered()))
        .unwrap();
    v.report(
        14,
        "correlated-background sanity",
        accs.iter().all(|a| (0.40..=0.60).contains(a)) && worst.miou_centered() <= 0.05,
        format!(
            "test acc {:?}; max centered mIoU {:.3} ({})",
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>(),
            worst.miou_centered(),
            worst.method
        ),
    );
}

fn runs_for(scenario: Scenario, background: Background) -> Vec<Run> {
    SEEDS
        .iter()
        .map(|&s| pipeline(scenario, background, s))
        .collect()
}

fn print_tables(label: &str, runs: &[Run]) {
    let rows: Vec<EvalRecord> = Method::ALL.iter().map(|&m| merged(runs, m)).collect();
    println!("-- {label} (mean over seeds {SEEDS:?}, {N_TEST} test samples each)");
    print!("{}", agop_core::metrics::format_table(&rows));
}

fn main() -> ExitCode {
    let start = Instant::now();
    eprintln!("acceptance: training {} seeds per scenario", SEEDS.len());
    let linear_start = Instant::now();
    let linear = runs_for(Scenario::Linear, Background::Uncorrelated);
    let linear_elapsed = linear_start.elapsed();
    let multiplicative = runs_for(Scenario::Multiplicative, Background::Uncorrelated);
    let transrot = runs_for(Scenario::TransRot, Background::Uncorrelated);
    let xor = runs_for(Scenario::Xor, Background::Uncorrelated);
    let correlated = runs_for(Scenario::Linear, Background::Correlated);

    for (label, runs) in [
        ("linear / uncorrelated", &linear),
        ("multiplicative / uncorrelated", &multiplicative),
        ("transrot / uncorrelated", &transrot),
        ("xor / uncorrelated", &xor),
        ("linear / correlated", &correlated),
    ] {
        print_tables(label, runs);
    }

    let mut v = Verdicts { failures: 0 };
    criterion_gradients(&mut v, &linear[0]);
    criterion_hook_oracle(&mut v, &linear[0]);
    criterion_non_interference(&mut v, &linear[0]);
    criterion_local_equals_vanilla(&mut v, &linear);
    criterion_completeness(&mut v, &linear[0]);
    criterion_linear(&mut v, &linear, linear_elapsed);
    criterion_multiplicative(&mut v, &multiplicative);
    criterion_transrot(&mut v, &transrot);
    criterion_xor(&mut v, &xor);
    criterion_convergence(&mut v, &linear);
    criterion_gradcam(&mut v, &linear);
    criterion_cost(&mut v, &linear);
    criterion_closed_forms(&mut v, &linear);
    criterion_correlated(&mut v, &correlated);

    println!(
        "acceptance: {} of 14 criteria passed in {:.0}s",
        14 - v.failures,
        start.elapsed().as_secs_f64()
    );
    if v.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
