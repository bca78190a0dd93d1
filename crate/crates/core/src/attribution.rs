//! The nine attribution methods.
//!
//! Every method maps one input to a non-negative per-pixel saliency map.
//! Gradient methods differentiate the logit of the predicted class ĉ (argmax
//! of the clean input). Inputs are single-channel, so the channel sum in the
//! usual definitions is the identity.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::agop::{AgopDiagonal, AgopHook};
use crate::data::SIDE;
use crate::error::{Error, Result};
use crate::model::{Classifier, Cnn8by8, GRADCAM_TARGET};
use crate::tensor::{ops, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Random,
    VanillaGrad,
    IntegratedGradients,
    SmoothGrad,
    GradCam,
    GradCamPp,
    AgopLocal,
    AgopWeighted,
    AgopGlobal,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Random,
        Method::VanillaGrad,
        Method::IntegratedGradients,
        Method::SmoothGrad,
        Method::GradCam,
        Method::GradCamPp,
        Method::AgopLocal,
        Method::AgopWeighted,
        Method::AgopGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::VanillaGrad => "vanilla_grad",
            Method::IntegratedGradients => "integrated_gradients",
            Method::SmoothGrad => "smoothgrad",
            Method::GradCam => "gradcam",
            Method::GradCamPp => "gradcam_pp",
            Method::AgopLocal => "agop_local",
            Method::AgopWeighted => "agop_weighted",
            Method::AgopGlobal => "agop_global",
        }
    }

    pub fn needs_diag(self) -> bool {
        matches!(self, Method::AgopWeighted | Method::AgopGlobal)
    }

    /// Comma-separated list of every registered method name.
    pub fn valid_names() -> String {
        Method::ALL.map(Method::name).join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown method '{s}'; valid methods: {}",
                    Method::valid_names()
                ))
            })
    }
}

/// Non-negative per-pixel attribution for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
    pub method: Method,
    /// Wall-clock time of the attribution call.
    pub ms_elapsed: f64,
}

fn timed(method: Method, f: impl FnOnce() -> Result<Vec<f64>>) -> Result<SaliencyMap> {
    let start = Instant::now();
    let values = f()?;
    let ms_elapsed = start.elapsed().as_secs_f64() * 1e3;
    Ok(SaliencyMap {
        values,
        method,
        ms_elapsed,
    })
}

fn abs_all(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::abs).collect()
}

/// `|∂f_ĉ/∂x|`.
pub fn vanilla_grad<M: Classifier + ?Sized>(model: &M, x: &[f64]) -> Result<SaliencyMap> {
    timed(Method::VanillaGrad, || {
        Ok(abs_all(model.predicted_class_gradient(x)?.1))
    })
}

/// AGOP evaluated on a single sample, reported as `sqrt(diag) = |g|`.
///
/// Deliberately goes through the AGOP accumulator rather than reusing
/// [`vanilla_grad`], so their agreement is a checked property.
pub fn agop_local<M: Classifier + ?Sized>(model: &M, x: &[f64]) -> Result<SaliencyMap> {
    timed(Method::AgopLocal, || {
        let mut hook = AgopHook::new(model.input_dim(), false);
        // The label is irrelevant without the correctness gate.
        hook.observe(model, &[(x, 0)])?;
        let diag = hook.finalize(0)?;
        Ok(diag.values.into_iter().map(f64::sqrt).collect())
    })
}

/// Per-pixel prior `sqrt(diag / max diag)`.
pub fn agop_prior(diag: &AgopDiagonal) -> Result<Vec<f64>> {
    let max = diag.max();
    if max <= 0.0 {
        return Err(Error::DegeneratePrior);
    }
    Ok(diag.values.iter().map(|d| (d / max).sqrt()).collect())
}

fn check_diag_dim(diag: &AgopDiagonal, dim: usize) -> Result<()> {
    if diag.dim() != dim {
        return Err(Error::Parameter(format!(
            "AGOP diagonal has dimension {}, model input has {dim}",
            diag.dim()
        )));
    }
    Ok(())
}

/// `|∂f_ĉ/∂x| ⊙ sqrt(diag / max diag)`.
pub fn agop_weighted<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    diag: &AgopDiagonal,
) -> Result<SaliencyMap> {
    check_diag_dim(diag, model.input_dim())?;
    timed(Method::AgopWeighted, || {
        let prior = agop_prior(diag)?;
        let (_, g) = model.predicted_class_gradient(x)?;
        Ok(g.iter().zip(&prior).map(|(g, v)| g.abs() * v).collect())
    })
}

/// The diagonal itself; identical for every input.
pub fn agop_global(diag: &AgopDiagonal) -> Result<SaliencyMap> {
    check_diag_dim(diag, SIDE * SIDE)?;
    timed(Method::AgopGlobal, || Ok(diag.values.clone()))
}

/// Signed integrated gradients along the straight path from `baseline`.
///
/// Right-endpoint Riemann sum with `steps` points `k/steps`, `k = 1..=steps`.
/// Returns the predicted class (at `x`) and the signed attributions.
pub fn integrated_gradients_signed<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<(usize, Vec<f64>)> {
    if steps < 1 {
        return Err(Error::Parameter(
            "integrated gradients needs steps >= 1".into(),
        ));
    }
    if baseline.len() != x.len() {
        return Err(Error::Dimension {
            op: "integrated_gradients",
            axis: "baseline",
            expected: x.len(),
            found: baseline.len(),
        });
    }
    let class = model.predict(x)?;
    let mut total = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 1..=steps {
        let t = k as f64 / steps as f64;
        for ((p, xi), bi) in point.iter_mut().zip(x).zip(baseline) {
            *p = bi + t * (xi - bi);
        }
        let (_, g) = model.logits_and_input_gradient(&point, class)?;
        for (acc, gi) in total.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let attr = total
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(s, (xi, bi))| (xi - bi) * s / steps as f64)
        .collect();
    Ok((class, attr))
}

/// `|IG|` with a zero baseline.
pub fn integrated_gradients<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    steps: usize,
) -> Result<SaliencyMap> {
    timed(Method::IntegratedGradients, || {
        let baseline = vec![0.0; x.len()];
        Ok(abs_all(
            integrated_gradients_signed(model, x, &baseline, steps)?.1,
        ))
    })
}

/// `|mean_k ∇f_ĉ(x + ε_k)|` with `ε_k ~ N(0, σ²I)`; ĉ comes from the clean input.
pub fn smoothgrad<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<SaliencyMap> {
    if samples < 1 {
        return Err(Error::Parameter(
            "smoothgrad needs at least one sample".into(),
        ));
    }
    let noise = Normal::new(0.0, sigma)
        .map_err(|e| Error::Parameter(format!("smoothgrad sigma {sigma}: {e}")))?;
    timed(Method::SmoothGrad, || {
        let class = model.predict(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = vec![0.0; x.len()];
        let mut noisy = vec![0.0; x.len()];
        for _ in 0..samples {
            for (n, xi) in noisy.iter_mut().zip(x) {
                *n = xi + noise.sample(&mut rng);
            }
            let (_, g) = model.logits_and_input_gradient(&noisy, class)?;
            for (acc, gi) in total.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        Ok(total
            .into_iter()
            .map(|s| (s / samples as f64).abs())
            .collect())
    })
}

/// I.i.d. uniform `[0, 1)` map.
pub fn random_baseline(seed: u64) -> SaliencyMap {
    timed(Method::Random, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..SIDE * SIDE).map(|_| rng.random::<f64>()).collect())
    })
    .expect("random baseline is infallible")
}

/// Activations of the target block and the gradient of f_ĉ with respect to them.
fn target_activations(model: &Cnn8by8, x: &[f64], target: usize) -> Result<(Tensor, Tensor)> {
    if target >= model.blocks.len() {
        return Err(Error::Parameter(format!(
            "GradCAM target block {target} out of range (model has {})",
            model.blocks.len()
        )));
    }
    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, x)?;
    let class = ops::argmax(tape.value(fwd.logits).data());
    let logit = tape.select(fwd.logits, class)?;
    let mut grads = tape.backward(logit)?;
    let layer = fwd.block_outputs[target];
    Ok((tape.value(layer).clone(), grads.take(layer)))
}

fn weighted_cam(activations: &Tensor, channel_weights: &[f64]) -> (usize, usize, Vec<f64>) {
    let s = activations.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let a = activations.data();
    let mut cam = vec![0.0; h * w];
    for (ch, wt) in channel_weights.iter().enumerate().take(c) {
        for (i, v) in cam.iter_mut().enumerate() {
            *v += wt * a[ch * h * w + i];
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    (h, w, cam)
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` reads
/// source coordinate `i · (in − 1) / (out − 1)`.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn finish_cam(h: usize, w: usize, cam: Vec<f64>) -> Vec<f64> {
    if h * w == 1 {
        log::warn!("GradCAM target layer is 1x1; the upsampled map is constant");
    }
    upsample_bilinear(&cam, h, w, SIDE, SIDE)
}

/// GradCAM channel weights: spatial mean of the gradient per channel.
pub fn gradcam_weights(grads: &Tensor) -> Vec<f64> {
    let s = grads.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    (0..c)
        .map(|ch| grads.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// GradCAM++ channel weights, following the original closed form for the
/// exponential-of-score formulation: with `g = ∂f_ĉ/∂A`,
/// `α = g² / (2g² + Σ_ij A · g³)` (zero where `g = 0`) and
/// `w_c = Σ_ij α · relu(g)`.
pub fn gradcam_pp_weights(activations: &Tensor, grads: &Tensor) -> Vec<f64> {
    const EPS: f64 = 1e-7;
    let s = grads.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let (a, g) = (activations.data(), grads.data());
    (0..c)
        .map(|ch| {
            let range = ch * hw..(ch + 1) * hw;
            let sum_a: f64 = a[range.clone()].iter().sum();
            g[range]
                .iter()
                .map(|&gi| {
                    if gi == 0.0 {
                        return 0.0;
                    }
                    let g2 = gi * gi;
                    let alpha = g2 / (2.0 * g2 + sum_a * g2 * gi + EPS);
                    alpha * gi.max(0.0)
                })
                .sum()
        })
        .collect()
}

pub fn gradcam(model: &Cnn8by8, x: &[f64], target: usize) -> Result<SaliencyMap> {
    timed(Method::GradCam, || {
        let (acts, grads) = target_activations(model, x, target)?;
        let (h, w, cam) = weighted_cam(&acts, &gradcam_weights(&grads));
        Ok(finish_cam(h, w, cam))
    })
}

pub fn gradcam_pp(model: &Cnn8by8, x: &[f64], target: usize) -> Result<SaliencyMap> {
    timed(Method::GradCamPp, || {
        let (acts, grads) = target_activations(model, x, target)?;
        let (h, w, cam) = weighted_cam(&acts, &gradcam_pp_weights(&acts, &grads));
        Ok(finish_cam(h, w, cam))
    })
}

/// Hyperparameters shared by every dispatch through [`attribute`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionSettings {
    pub ig_steps: usize,
    pub smoothgrad_samples: usize,
    pub smoothgrad_sigma: f64,
    pub gradcam_target: usize,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        Self {
            ig_steps: 50,
            smoothgrad_samples: 50,
            smoothgrad_sigma: 0.15,
            gradcam_target: GRADCAM_TARGET,
        }
    }
}

/// Per-sample seed derived from a run seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run one method on one input. `seed` drives Random and SmoothGrad.
pub fn attribute(
    method: Method,
    model: &Cnn8by8,
    diag: Option<&AgopDiagonal>,
    x: &[f64],
    settings: &AttributionSettings,
    seed: u64,
) -> Result<SaliencyMap> {
    let need_diag =
        || diag.ok_or_else(|| Error::Config(format!("method {method} requires an AGOP diagonal")));
    match method {
        Method::Random => Ok(random_baseline(seed)),
        Method::VanillaGrad => vanilla_grad(model, x),
        Method::IntegratedGradients => integrated_gradients(model, x, settings.ig_steps),
        Method::SmoothGrad => smoothgrad(
            model,
            x,
            settings.smoothgrad_samples,
            settings.smoothgrad_sigma,
            seed,
        ),
        Method::GradCam => gradcam(model, x, settings.gradcam_target),
        Method::GradCamPp => gradcam_pp(model, x, settings.gradcam_target),
        Method::AgopLocal => agop_local(model, x),
        Method::AgopWeighted => agop_weighted(model, x, need_diag()?),
        Method::AgopGlobal => agop_global(need_diag()?),
    }
}

/// 8-bit binary PGM of the map, min-max scaled (constant maps become black).
pub fn encode_pgm(map: &SaliencyMap) -> Vec<u8> {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut buf = format!("P5\n{SIDE} {SIDE}\n255\n").into_bytes();
    buf.extend(map.values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    buf
}

/// Write `<method>_<index>.pgm` into `dir`; returns the file path.
pub fn write_pgm(dir: &Path, map: &SaliencyMap, index: usize) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}_{index}.pgm", map.method));
    fs::write(&path, encode_pgm(map)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
