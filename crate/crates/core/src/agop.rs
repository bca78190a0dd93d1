//! Training-time accumulation of the AGOP diagonal.
//!
//! For every (optionally only correctly classified) sample the squared
//! input-gradient of the *predicted* class logit is added to a running sum;
//! the diagonal is that sum divided by the number of accumulated samples.
//! Running means can be snapshotted mid-training and persisted.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{write_atomic, Sample};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::ops;
use crate::train::TrainingHook;

/// Mean squared input-gradient per pixel, with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AgopDiagonal {
    pub values: Vec<f64>,
    pub n_acc: u64,
    pub step: u64,
    pub only_correct: bool,
}

impl AgopDiagonal {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Running accumulator implementing the training-time hook.
#[derive(Clone, Debug)]
pub struct AgopHook {
    sum: Vec<f64>,
    n_acc: u64,
    only_correct: bool,
    finalized: bool,
    snapshots: Vec<AgopDiagonal>,
    snapshot_dir: Option<PathBuf>,
}

impl AgopHook {
    pub fn new(dim: usize, only_correct: bool) -> Self {
        Self {
            sum: vec![0.0; dim],
            n_acc: 0,
            only_correct,
            finalized: false,
            snapshots: Vec::new(),
            snapshot_dir: None,
        }
    }

    /// Persist every snapshot as `agop_step<k>.diag` under `dir`.
    pub fn with_snapshot_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.snapshot_dir = Some(dir.into());
        self
    }

    pub fn n_acc(&self) -> u64 {
        self.n_acc
    }

    pub fn running_sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn only_correct(&self) -> bool {
        self.only_correct
    }

    pub fn snapshots(&self) -> &[AgopDiagonal] {
        &self.snapshots
    }

    fn ensure_open(&self) -> Result<()> {
        if self.finalized {
            return Err(Error::State("AGOP hook already finalized".into()));
        }
        Ok(())
    }

    /// Add one sample's input-gradient.
    pub fn accumulate(&mut self, grad: &[f64]) -> Result<()> {
        self.ensure_open()?;
        if grad.len() != self.sum.len() {
            return Err(Error::Dimension {
                op: "agop_accumulate",
                axis: "input",
                expected: self.sum.len(),
                found: grad.len(),
            });
        }
        for (s, g) in self.sum.iter_mut().zip(grad) {
            *s += g * g;
        }
        self.n_acc += 1;
        Ok(())
    }

    /// Accumulate a batch of `(input, label)` pairs at the current model.
    ///
    /// Per-sample gradients are computed in parallel and added in batch
    /// order. Returns the number of samples that passed the gate.
    pub fn observe<M: Classifier + ?Sized>(
        &mut self,
        model: &M,
        batch: &[(&[f64], usize)],
    ) -> Result<usize> {
        self.ensure_open()?;
        let grads = gated_gradients(model, batch, self.only_correct)?;
        let accepted = grads.len();
        for g in grads {
            self.accumulate(&g)?;
        }
        Ok(accepted)
    }

    fn mean(&self) -> Result<Vec<f64>> {
        if self.n_acc == 0 {
            return Err(Error::EmptyAccumulation);
        }
        let n = self.n_acc as f64;
        Ok(self.sum.iter().map(|s| s / n).collect())
    }

    /// Record (and persist, if configured) the running mean at `step`.
    pub fn snapshot(&mut self, step: u64) -> Result<AgopDiagonal> {
        self.ensure_open()?;
        let diag = AgopDiagonal {
            values: self.mean()?,
            n_acc: self.n_acc,
            step,
            only_correct: self.only_correct,
        };
        if let Some(dir) = &self.snapshot_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_diag(&dir.join(format!("agop_step{step}.diag")), &diag)?;
        }
        self.snapshots.push(diag.clone());
        Ok(diag)
    }

    /// Divide the running sum by the sample count; the hook is closed afterwards.
    pub fn finalize(&mut self, step: u64) -> Result<AgopDiagonal> {
        self.ensure_open()?;
        let values = self.mean()?;
        self.finalized = true;
        Ok(AgopDiagonal {
            values,
            n_acc: self.n_acc,
            step,
            only_correct: self.only_correct,
        })
    }
}

fn gated_gradients<M: Classifier + ?Sized>(
    model: &M,
    batch: &[(&[f64], usize)],
    only_correct: bool,
) -> Result<Vec<Vec<f64>>> {
    let per_sample: Vec<Option<Vec<f64>>> = batch
        .par_iter()
        .map(|&(x, label)| -> Result<Option<Vec<f64>>> {
            let predicted = ops::argmax(&model.logits(x)?);
            if only_correct && predicted != label {
                return Ok(None);
            }
            Ok(Some(model.logits_and_input_gradient(x, predicted)?.1))
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

impl TrainingHook for AgopHook {
    fn observe_batch(&mut self, model: &dyn Classifier, batch: &[(&[f64], usize)]) -> Result<()> {
        self.observe(model, batch).map(|_| ())
    }

    fn snapshot(&mut self, step: u64) -> Result<()> {
        match AgopHook::snapshot(self, step) {
            Ok(_) => Ok(()),
            Err(Error::EmptyAccumulation) => {
                log::warn!("no gradients accepted by step {step}; snapshot skipped");
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// One pass over `dataset` at a fixed model; same arithmetic as the hook.
pub fn posthoc_diag<M: Classifier + ?Sized>(
    model: &M,
    dataset: &[Sample],
    only_correct: bool,
) -> Result<AgopDiagonal> {
    if dataset.is_empty() {
        return Err(Error::Parameter("posthoc_diag of an empty dataset".into()));
    }
    let batch: Vec<(&[f64], usize)> = dataset.iter().map(|s| (&s.image[..], s.label)).collect();
    let mut hook = AgopHook::new(model.input_dim(), only_correct);
    hook.observe(model, &batch)?;
    hook.finalize(0)
}

const DIAG_MAGIC: &[u8; 6] = b"AGOPD1";
const DIAG_VERSION: u8 = 1;
const DIAG_HEADER: usize = 6 + 1 + 1 + 4 + 8 + 8;

pub fn encode_diag(diag: &AgopDiagonal) -> Vec<u8> {
    let mut buf = Vec::with_capacity(DIAG_HEADER + 8 * diag.dim());
    buf.extend_from_slice(DIAG_MAGIC);
    buf.push(DIAG_VERSION);
    buf.push(u8::from(diag.only_correct));
    buf.extend_from_slice(&(diag.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&diag.n_acc.to_le_bytes());
    buf.extend_from_slice(&diag.step.to_le_bytes());
    for v in &diag.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_diag(bytes: &[u8]) -> Result<AgopDiagonal> {
    if bytes.len() < DIAG_HEADER {
        return Err(Error::Truncated {
            expected: DIAG_HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..6] != DIAG_MAGIC {
        return Err(Error::format(0, "bad magic, expected AGOPD1"));
    }
    if bytes[6] != DIAG_VERSION {
        return Err(Error::format(
            6,
            format!("unsupported version {}", bytes[6]),
        ));
    }
    let only_correct = match bytes[7] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::format(
                7,
                format!("only_correct byte {other} not 0/1"),
            ))
        }
    };
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_acc = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let step = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let expected = DIAG_HEADER + 8 * d;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = bytes[DIAG_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::format(
            (DIAG_HEADER + 8 * i) as u64,
            "diag values must be finite and non-negative",
        ));
    }
    Ok(AgopDiagonal {
        values,
        n_acc,
        step,
        only_correct,
    })
}

pub fn save_diag(path: &Path, diag: &AgopDiagonal) -> Result<()> {
    write_atomic(path, &encode_diag(diag))
}

pub fn load_diag(path: &Path) -> Result<AgopDiagonal> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_diag(&bytes)
}
