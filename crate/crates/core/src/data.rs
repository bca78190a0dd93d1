//! Synthetic 8×8 tetromino benchmark with pixel-exact ground truth.
//!
//! Four scenarios of increasing difficulty share one construction: a
//! background image (i.i.d. standard normal noise, optionally plus a
//! spurious class template) mixed with a T or L tetromino. Pattern,
//! template and noise components are scaled to equal expected energy
//! (`PIXELS` for the noise) before mixing with weight `alpha`, so a signal
//! pixel carries amplitude `alpha * sqrt(PIXELS / 4)`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 8;
pub const PIXELS: usize = SIDE * SIDE;

/// Anchor of the tetromino in the fixed-position scenarios.
pub const FIXED_ANCHOR: (usize, usize) = (2, 2);
/// The two XOR sites: a T at the first, an L at the second.
pub const XOR_SITES: [(usize, usize); 2] = [(0, 0), (5, 5)];
pub const DEFAULT_ALPHA: f64 = 0.18;
pub const TRANSROT_ALPHA: f64 = 0.5;
/// Multiplicative modulation is `1 + alpha * kappa` on pattern pixels. The
/// default damps them (factor 0.46 at the default alpha): the class is
/// carried by where the image is quiet.
pub const DEFAULT_KAPPA: f64 = -3.0;

const MAGIC: &[u8; 5] = b"XTRB1";
const VERSION: u8 = 1;
const HEADER_LEN: u64 = 18;
const RECORD_LEN: u64 = (PIXELS * 4 + 1 + PIXELS) as u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Linear,
    Multiplicative,
    TransRot,
    Xor,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Linear,
        Scenario::Multiplicative,
        Scenario::TransRot,
        Scenario::Xor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Linear => "linear",
            Scenario::Multiplicative => "multiplicative",
            Scenario::TransRot => "transrot",
            Scenario::Xor => "xor",
        }
    }

    /// Mixing weight used when none is given. Random placement needs a
    /// stronger signal before the small network can find it at all.
    pub fn default_alpha(self) -> f64 {
        match self {
            Scenario::TransRot => TRANSROT_ALPHA,
            _ => DEFAULT_ALPHA,
        }
    }

    /// Number of ground-truth pixels per sample.
    pub fn mask_size(self) -> usize {
        match self {
            Scenario::Xor => 8,
            _ => 4,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown scenario '{s}' (expected linear, multiplicative, transrot or xor)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Background {
    Uncorrelated,
    Correlated,
}

impl Background {
    pub fn name(self) -> &'static str {
        match self {
            Background::Uncorrelated => "uncorrelated",
            Background::Correlated => "correlated",
        }
    }
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncorrelated" => Ok(Background::Uncorrelated),
            "correlated" => Ok(Background::Correlated),
            _ => Err(Error::Parameter(format!(
                "unknown background '{s}' (expected uncorrelated or correlated)"
            ))),
        }
    }
}

/// Which half of an experiment a dataset belongs to.
///
/// Only the correlated background distinguishes the two: the class template
/// follows the label in the training split and is drawn independently of the
/// label in the test split, so the shortcut does not transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub background: Background,
    pub n: usize,
    pub seed: u64,
    pub alpha: f64,
    pub kappa: f64,
    pub split: Split,
    /// Test hook: drop the noise component entirely.
    pub zero_noise: bool,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, background: Background, n: usize, seed: u64) -> Self {
        Self {
            scenario,
            background,
            n,
            seed,
            alpha: scenario.default_alpha(),
            kappa: DEFAULT_KAPPA,
            split: Split::Train,
            zero_noise: false,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Parameter(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.n < 2 {
            return Err(Error::Parameter(format!("n must be >= 2, got {}", self.n)));
        }
        if !self.n.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "n must be even for exact class balance, got {}",
                self.n
            )));
        }
        let factor = 1.0 + self.alpha * self.kappa;
        if self.scenario == Scenario::Multiplicative && !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::Parameter(format!(
                "modulation factor 1 + alpha*kappa must be finite and non-negative, got {factor}"
            )));
        }
        Ok(())
    }
}

/// One benchmark image with its label and ground-truth signal mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: [f64; PIXELS],
    pub label: usize,
    pub mask: [bool; PIXELS],
}

impl Sample {
    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(vec![1, SIDE, SIDE], self.image.to_vec()).expect("8x8 image")
    }

    pub fn mask_popcount(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A tetromino as (row, col) offsets from its bounding-box origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    offsets: Vec<(usize, usize)>,
}

impl Pattern {
    pub fn new(offsets: Vec<(usize, usize)>) -> Self {
        let mut p = Self { offsets };
        p.normalize();
        p
    }

    fn normalize(&mut self) {
        let r0 = self.offsets.iter().map(|o| o.0).min().unwrap_or(0);
        let c0 = self.offsets.iter().map(|o| o.1).min().unwrap_or(0);
        for o in &mut self.offsets {
            *o = (o.0 - r0, o.1 - c0);
        }
        self.offsets.sort_unstable();
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    pub fn height(&self) -> usize {
        self.offsets.iter().map(|o| o.0).max().map_or(0, |r| r + 1)
    }

    pub fn width(&self) -> usize {
        self.offsets.iter().map(|o| o.1).max().map_or(0, |c| c + 1)
    }

    /// Quarter turn clockwise.
    pub fn rotated(&self) -> Self {
        let h = self.height();
        Pattern::new(self.offsets.iter().map(|&(r, c)| (c, h - 1 - r)).collect())
    }

    /// All four axis-aligned orientations, starting with the identity.
    pub fn rotations(&self) -> [Pattern; 4] {
        let r1 = self.rotated();
        let r2 = r1.rotated();
        let r3 = r2.rotated();
        [self.clone(), r1, r2, r3]
    }

    /// Flat pixel indices of the pattern placed at `anchor`.
    pub fn pixels_at(&self, anchor: (usize, usize)) -> Vec<usize> {
        self.offsets
            .iter()
            .map(|&(r, c)| (anchor.0 + r) * SIDE + anchor.1 + c)
            .collect()
    }
}

/// The class patterns: index 0 is the T, index 1 the L.
pub fn tetromino_patterns() -> [Pattern; 2] {
    [
        Pattern::new(vec![(0, 0), (0, 1), (0, 2), (1, 1)]),
        Pattern::new(vec![(0, 0), (1, 0), (2, 0), (2, 1)]),
    ]
}

fn energy_scale(popcount: usize) -> f64 {
    (PIXELS as f64 / popcount as f64).sqrt()
}

/// Coarse 2×2 checkerboard upsampled to 8×8, entries ±1.
fn checkerboard() -> [f64; PIXELS] {
    let mut t = [0.0; PIXELS];
    for (i, v) in t.iter_mut().enumerate() {
        let (r, c) = (i / SIDE, i % SIDE);
        *v = if (r / (SIDE / 2) + c / (SIDE / 2)).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
    }
    t
}

fn class_sign(label: usize) -> f64 {
    if label == 0 {
        1.0
    } else {
        -1.0
    }
}

fn random_sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Deterministically generate `spec.n` samples, exactly half per class.
pub fn generate_dataset(spec: &ScenarioSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match spec.split {
        Split::Train => 0,
        Split::Test => 1,
    });

    let mut labels: Vec<usize> = (0..spec.n).map(|i| usize::from(i >= spec.n / 2)).collect();
    labels.shuffle(&mut rng);

    let patterns = tetromino_patterns();
    let template = checkerboard();
    let alpha = spec.alpha;
    let amp = alpha * energy_scale(4);

    let mut samples = Vec::with_capacity(spec.n);
    for label in labels {
        let mut background = [0.0; PIXELS];
        for v in &mut background {
            let z: f64 = rng.sample(StandardNormal);
            *v = if spec.zero_noise { 0.0 } else { z };
        }
        if spec.background == Background::Correlated {
            let sign = match spec.split {
                Split::Train => class_sign(label),
                Split::Test => random_sign(&mut rng),
            };
            for (b, t) in background.iter_mut().zip(&template) {
                *b += amp * sign * t;
            }
        }

        let mut image = [0.0; PIXELS];
        let mut mask = [false; PIXELS];
        match spec.scenario {
            Scenario::Linear | Scenario::TransRot => {
                let (pattern, anchor) = if spec.scenario == Scenario::Linear {
                    (patterns[label].clone(), FIXED_ANCHOR)
                } else {
                    let rot = rng.random_range(0..4);
                    let p = patterns[label].rotations()[rot].clone();
                    let r = rng.random_range(0..=SIDE - p.height());
                    let c = rng.random_range(0..=SIDE - p.width());
                    (p, (r, c))
                };
                for (dst, b) in image.iter_mut().zip(&background) {
                    *dst = (1.0 - alpha) * b;
                }
                for px in pattern.pixels_at(anchor) {
                    image[px] += amp;
                    mask[px] = true;
                }
            }
            Scenario::Multiplicative => {
                image = background;
                let factor = 1.0 + alpha * spec.kappa;
                for px in patterns[label].pixels_at(FIXED_ANCHOR) {
                    image[px] *= factor;
                    mask[px] = true;
                }
            }
            Scenario::Xor => {
                let s_a = random_sign(&mut rng);
                let s_b = if label == 0 { s_a } else { -s_a };
                image = background;
                for (pattern, (site, sign)) in patterns.iter().zip(XOR_SITES.iter().zip([s_a, s_b]))
                {
                    for px in pattern.pixels_at(*site) {
                        image[px] = alpha * sign;
                        mask[px] = true;
                    }
                }
            }
        }
        // Quantise to the on-disk precision so file round trips are exact.
        for v in &mut image {
            *v = *v as f32 as f64;
        }
        samples.push(Sample { image, label, mask });
    }
    Ok(samples)
}

/// Per-pixel mean image, used as the deletion/insertion baseline.
pub fn pixel_mean(samples: &[Sample]) -> Result<[f64; PIXELS]> {
    if samples.is_empty() {
        return Err(Error::Parameter("pixel_mean of an empty dataset".into()));
    }
    let mut mean = [0.0; PIXELS];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(&s.image) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= samples.len() as f64;
    }
    Ok(mean)
}

pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut buf = Vec::with_capacity((HEADER_LEN + RECORD_LEN * samples.len() as u64) as usize);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(SIDE as u32).to_le_bytes());
    buf.extend_from_slice(&(SIDE as u32).to_le_bytes());
    for s in samples {
        for v in &s.image {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf.push(s.label as u8);
        buf.extend(s.mask.iter().map(|&m| u8::from(m)));
    }
    buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::format(0, "bad magic, expected XTRB1"));
    }
    if bytes[5] != VERSION {
        return Err(Error::format(
            5,
            format!("unsupported version {}", bytes[5]),
        ));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let n = read_u32(6) as u64;
    let (h, w) = (read_u32(10), read_u32(14));
    if h as usize != SIDE {
        return Err(Error::format(10, format!("unsupported height {h}")));
    }
    if w as usize != SIDE {
        return Err(Error::format(14, format!("unsupported width {w}")));
    }
    let expected = HEADER_LEN + n * RECORD_LEN;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut samples = Vec::with_capacity(n as usize);
    for k in 0..n as usize {
        let base = HEADER_LEN as usize + k * RECORD_LEN as usize;
        let mut image = [0.0; PIXELS];
        for (i, v) in image.iter_mut().enumerate() {
            let at = base + 4 * i;
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
        }
        let label_at = base + 4 * PIXELS;
        let label = bytes[label_at];
        if label > 1 {
            return Err(Error::format(
                label_at as u64,
                format!("label {label} not in {{0,1}}"),
            ));
        }
        let mut mask = [false; PIXELS];
        for (i, m) in mask.iter_mut().enumerate() {
            let at = label_at + 1 + i;
            *m = match bytes[at] {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::format(
                        at as u64,
                        format!("mask byte {other} not 0/1"),
                    ))
                }
            };
        }
        samples.push(Sample {
            image,
            label: label as usize,
            mask,
        });
    }
    Ok(samples)
}

/// Write a dataset file (temp file then rename).
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    write_atomic(path, &encode_dataset(samples))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
