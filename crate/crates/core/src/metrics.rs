//! Localisation and faithfulness metrics, and the per-method evaluation suite.
//!
//! Localisation metrics (pointing game, mIoU, Energy-GT) compare a saliency
//! map with the ground-truth mask. Deletion and insertion probe the model:
//! pixels are swapped with a baseline image in descending saliency order and
//! the softmax probability of the clean prediction is tracked.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::agop::AgopDiagonal;
use crate::attribution::{attribute, derive_seed, AttributionSettings, Method};
use crate::data::{Background, Sample, Scenario, PIXELS};
use crate::error::{Error, Result};
use crate::model::{Classifier, Cnn8by8};
use crate::tensor::ops;

pub const REPORT_HEADER: &str =
    "method,scenario,background,pg,miou,energy_gt,deletion,insertion,ms_per_sample,n,seed";

fn check_pair(op: &'static str, map: &[f64], mask: &[bool]) -> Result<usize> {
    if map.len() != mask.len() {
        return Err(Error::Dimension {
            op,
            axis: "pixels",
            expected: mask.len(),
            found: map.len(),
        });
    }
    let k = mask.iter().filter(|&&m| m).count();
    if k == 0 {
        return Err(Error::Parameter(format!(
            "{op}: ground-truth mask is empty"
        )));
    }
    Ok(k)
}

/// Pixel indices by descending value; equal values keep index order.
pub fn ranking(map: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]));
    order
}

/// Whether the first maximum of `map` lies inside `mask`.
pub fn pointing_game(map: &[f64], mask: &[bool]) -> Result<bool> {
    check_pair("pointing_game", map, mask)?;
    Ok(mask[ops::argmax(map)])
}

/// IoU between the top-k pixels of `map` (k = mask size) and the mask.
pub fn miou(map: &[f64], mask: &[bool]) -> Result<f64> {
    let k = check_pair("miou", map, mask)?;
    let hits = ranking(map)[..k].iter().filter(|&&i| mask[i]).count();
    Ok(hits as f64 / (2 * k - hits) as f64)
}

/// Share of the map's total mass that falls inside the mask.
pub fn energy_gt(map: &[f64], mask: &[bool]) -> Result<f64> {
    check_pair("energy_gt", map, mask)?;
    let total: f64 = map.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedMass);
    }
    let inside: f64 = map
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(inside / total)
}

fn class_probability<M: Classifier + ?Sized>(model: &M, x: &[f64], class: usize) -> Result<f64> {
    Ok(ops::softmax(&model.logits(x)?)[class])
}

fn check_curve_inputs(image: &[f64], order: &[usize], baseline: &[f64]) -> Result<()> {
    if baseline.len() != image.len() {
        return Err(Error::Dimension {
            op: "perturbation_curve",
            axis: "baseline",
            expected: image.len(),
            found: baseline.len(),
        });
    }
    if order.len() != image.len() || order.iter().any(|&i| i >= image.len()) {
        return Err(Error::Parameter(
            "perturbation order must be a permutation of the pixels".into(),
        ));
    }
    Ok(())
}

/// Probabilities of `class` as pixels in `order` are replaced by `baseline`,
/// starting from the untouched image (`len + 1` points).
pub fn deletion_curve<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    order: &[usize],
    baseline: &[f64],
    class: usize,
) -> Result<Vec<f64>> {
    check_curve_inputs(image, order, baseline)?;
    let mut current = image.to_vec();
    let mut curve = Vec::with_capacity(order.len() + 1);
    curve.push(class_probability(model, &current, class)?);
    for &i in order {
        current[i] = baseline[i];
        curve.push(class_probability(model, &current, class)?);
    }
    Ok(curve)
}

/// Probabilities of `class` as pixels in `order` are revealed on top of
/// `baseline`, starting from the baseline itself.
pub fn insertion_curve<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    order: &[usize],
    baseline: &[f64],
    class: usize,
) -> Result<Vec<f64>> {
    check_curve_inputs(image, order, baseline)?;
    let mut current = baseline.to_vec();
    let mut curve = Vec::with_capacity(order.len() + 1);
    curve.push(class_probability(model, &current, class)?);
    for &i in order {
        current[i] = image[i];
        curve.push(class_probability(model, &current, class)?);
    }
    Ok(curve)
}

/// Area under a perturbation curve: the mean of its points.
pub fn curve_auc(curve: &[f64]) -> f64 {
    curve.iter().sum::<f64>() / curve.len() as f64
}

pub fn deletion_auc<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    map: &[f64],
    baseline: &[f64],
) -> Result<f64> {
    let class = model.predict(image)?;
    Ok(curve_auc(&deletion_curve(
        model,
        image,
        &ranking(map),
        baseline,
        class,
    )?))
}

pub fn insertion_auc<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    map: &[f64],
    baseline: &[f64],
) -> Result<f64> {
    let class = model.predict(image)?;
    Ok(curve_auc(&insertion_curve(
        model,
        image,
        &ranking(map),
        baseline,
        class,
    )?))
}

fn binomial(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    let r = r.min(n - r);
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Expected pointing game of a map whose peak is uniform over `d` pixels.
pub fn random_pointing_game(k: usize, d: usize) -> f64 {
    k as f64 / d as f64
}

/// Expected mIoU of a uniformly random top-k set against a k-pixel mask:
/// `E[I / (2k - I)]` with `I ~ Hypergeometric(d, k, k)`.
pub fn random_miou(k: usize, d: usize) -> f64 {
    let total = binomial(d, k);
    (0..=k)
        .map(|i| {
            let p = binomial(k, i) * binomial(d - k, k - i) / total;
            p * i as f64 / (2 * k - i) as f64
        })
        .sum()
}

/// Expected Energy-GT of a map with exchangeable pixel values.
pub fn random_energy_gt(k: usize, d: usize) -> f64 {
    k as f64 / d as f64
}

/// Mean metrics of one method over one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub method: Method,
    pub scenario: Scenario,
    pub background: Background,
    pub pg: f64,
    pub miou: f64,
    pub energy_gt: f64,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    pub ms_per_sample: f64,
    pub n: usize,
    pub seeds: Vec<u64>,
}

impl EvalRecord {
    /// Pointing game minus the random expectation for this scenario.
    pub fn pg_centered(&self) -> f64 {
        self.pg - random_pointing_game(self.scenario.mask_size(), PIXELS)
    }

    pub fn miou_centered(&self) -> f64 {
        self.miou - random_miou(self.scenario.mask_size(), PIXELS)
    }

    pub fn energy_gt_centered(&self) -> f64 {
        self.energy_gt - random_energy_gt(self.scenario.mask_size(), PIXELS)
    }

    fn same_cell(&self, other: &EvalRecord) -> bool {
        self.method == other.method
            && self.scenario == other.scenario
            && self.background == other.background
    }
}

/// Sample-weighted average of records for the same method and scenario,
/// typically one per seed.
pub fn merge_records(records: &[EvalRecord]) -> Result<EvalRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::Parameter("cannot merge zero records".into()))?;
    if records.iter().any(|r| !r.same_cell(first)) {
        return Err(Error::Parameter(
            "merged records must share method, scenario and background".into(),
        ));
    }
    let n: usize = records.iter().map(|r| r.n).sum();
    if n == 0 {
        return Err(Error::Parameter("merged records cover zero samples".into()));
    }
    let mean = |f: fn(&EvalRecord) -> f64| -> f64 {
        records.iter().map(|r| f(r) * r.n as f64).sum::<f64>() / n as f64
    };
    Ok(EvalRecord {
        method: first.method,
        scenario: first.scenario,
        background: first.background,
        pg: mean(|r| r.pg),
        miou: mean(|r| r.miou),
        energy_gt: mean(|r| r.energy_gt),
        deletion_auc: mean(|r| r.deletion_auc),
        insertion_auc: mean(|r| r.insertion_auc),
        ms_per_sample: mean(|r| r.ms_per_sample),
        n,
        seeds: records
            .iter()
            .flat_map(|r| r.seeds.iter().copied())
            .collect(),
    })
}

/// Everything about an evaluation run other than the model and the data.
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub scenario: Scenario,
    pub background: Background,
    pub seed: u64,
    pub settings: AttributionSettings,
    /// Replacement image for deletion/insertion, normally the training mean.
    pub baseline: Vec<f64>,
}

#[derive(Clone, Copy, Default)]
struct SampleScores {
    pg: f64,
    miou: f64,
    energy_gt: f64,
    deletion: f64,
    insertion: f64,
    ms: f64,
}

fn score_sample(
    method: Method,
    model: &Cnn8by8,
    diag: Option<&AgopDiagonal>,
    sample: &Sample,
    index: usize,
    cfg: &SuiteConfig,
) -> Result<SampleScores> {
    let x = &sample.image[..];
    let map = attribute(
        method,
        model,
        diag,
        x,
        &cfg.settings,
        derive_seed(cfg.seed, index as u64),
    )?;
    let class = model.predict(x)?;
    let order = ranking(&map.values);
    // A map with no mass spreads it evenly.
    let energy = match energy_gt(&map.values, &sample.mask) {
        Err(Error::UndefinedMass) => sample.mask_popcount() as f64 / PIXELS as f64,
        other => other?,
    };
    Ok(SampleScores {
        pg: f64::from(u8::from(pointing_game(&map.values, &sample.mask)?)),
        miou: miou(&map.values, &sample.mask)?,
        energy_gt: energy,
        deletion: curve_auc(&deletion_curve(model, x, &order, &cfg.baseline, class)?),
        insertion: curve_auc(&insertion_curve(model, x, &order, &cfg.baseline, class)?),
        ms: map.ms_elapsed,
    })
}

/// Evaluate each method on every sample and average the metrics.
///
/// Samples are scored in parallel and summed in index order, so the metric
/// columns do not depend on scheduling. Random and SmoothGrad draw from a
/// seed derived from `cfg.seed` and the sample index.
pub fn evaluate_suite(
    model: &Cnn8by8,
    diag: Option<&AgopDiagonal>,
    samples: &[Sample],
    methods: &[Method],
    cfg: &SuiteConfig,
) -> Result<Vec<EvalRecord>> {
    if samples.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    if cfg.baseline.len() != PIXELS {
        return Err(Error::Dimension {
            op: "evaluate_suite",
            axis: "baseline",
            expected: PIXELS,
            found: cfg.baseline.len(),
        });
    }
    if let Some(m) = methods.iter().find(|m| m.needs_diag()) {
        if diag.is_none() {
            return Err(Error::Config(format!(
                "method {m} requires an AGOP diagonal"
            )));
        }
    }

    let mut records = Vec::with_capacity(methods.len());
    for &method in methods {
        let scores = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| score_sample(method, model, diag, s, i, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = SampleScores::default();
        for s in &scores {
            sum.pg += s.pg;
            sum.miou += s.miou;
            sum.energy_gt += s.energy_gt;
            sum.deletion += s.deletion;
            sum.insertion += s.insertion;
            sum.ms += s.ms;
        }
        let n = samples.len() as f64;
        records.push(EvalRecord {
            method,
            scenario: cfg.scenario,
            background: cfg.background,
            pg: sum.pg / n,
            miou: sum.miou / n,
            energy_gt: sum.energy_gt / n,
            deletion_auc: sum.deletion / n,
            insertion_auc: sum.insertion / n,
            ms_per_sample: sum.ms / n,
            n: samples.len(),
            seeds: vec![cfg.seed],
        });
    }
    Ok(records)
}

/// Mean mIoU of a fixed map (e.g. a diag snapshot) over a labelled set.
pub fn fixed_map_miou(map: &[f64], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += miou(map, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Trailing moving average; the output has `len - window + 1` points.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || series.len() < window {
        return Vec::new();
    }
    series
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Decimal rendering with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn report_csv(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in records {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.scenario,
            r.background,
            format_sig(r.pg, 6),
            format_sig(r.miou, 6),
            format_sig(r.energy_gt, 6),
            format_sig(r.deletion_auc, 6),
            format_sig(r.insertion_auc, 6),
            format_sig(r.ms_per_sample, 6),
            r.n,
            seeds.join(";"),
        );
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "report is empty".into(),
    })?;
    if header.trim() != REPORT_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header '{REPORT_HEADER}'"),
        });
    }
    let mut records = Vec::new();
    for (line, text) in lines {
        if text.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line, message };
        let fields: Vec<&str> = text.trim().split(',').collect();
        if fields.len() != 11 {
            return Err(bad(format!("expected 11 fields, found {}", fields.len())));
        }
        let float = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("field {}: {e}", i + 1)))
        };
        let seeds = fields[10]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|e| bad(format!("seed '{s}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(EvalRecord {
            method: fields[0].parse().map_err(|e: Error| bad(e.to_string()))?,
            scenario: fields[1].parse().map_err(|e: Error| bad(e.to_string()))?,
            background: fields[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            pg: float(3)?,
            miou: float(4)?,
            energy_gt: float(5)?,
            deletion_auc: float(6)?,
            insertion_auc: float(7)?,
            ms_per_sample: float(8)?,
            n: fields[9]
                .parse()
                .map_err(|e| bad(format!("field 10: {e}")))?,
            seeds,
        });
    }
    if records.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "report has no rows".into(),
        });
    }
    Ok(records)
}

/// Aligned text table sorted by mIoU (highest first), with mean-centered
/// columns next to the raw localisation scores.
pub fn format_table(records: &[EvalRecord]) -> String {
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.miou.total_cmp(&a.miou));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:<15} {:<13} {:>7} {:>7} {:>8} {:>9} {:>9} {:>7} {:>7} {:>9}",
        "method",
        "scenario",
        "background",
        "pg",
        "miou",
        "miou_c",
        "energy_gt",
        "energy_c",
        "del",
        "ins",
        "ms/sample"
    );
    for r in sorted {
        let _ = writeln!(
            out,
            "{:<22} {:<15} {:<13} {:>7.3} {:>7.3} {:>8.3} {:>9.3} {:>9.3} {:>7.3} {:>7.3} {:>9.4}",
            r.method.name(),
            r.scenario.name(),
            r.background.name(),
            r.pg,
            r.miou,
            r.miou_centered(),
            r.energy_gt,
            r.energy_gt_centered(),
            r.deletion_auc,
            r.insertion_auc,
            r.ms_per_sample,
        );
    }
    out
}
