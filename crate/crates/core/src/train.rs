//! Adam + cosine-annealed training loop with an optional observer hook.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{evaluate_accuracy, Classifier, Cnn8by8};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub snapshot_every: u64,
    pub only_correct: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
            snapshot_every: 100,
            only_correct: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.snapshot_every < 1 {
            return Err(Error::Parameter(
                "epochs, batch_size and snapshot_every must be >= 1".into(),
            ));
        }
        if !(self.lr0 > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "lr0 must be > 0 and weight_decay >= 0 (got {}, {})",
                self.lr0, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Observer driven by [`train`].
///
/// `observe_batch` sees each minibatch at the pre-update parameters;
/// `snapshot` fires after every `snapshot_every`-th optimizer step.
pub trait TrainingHook {
    fn observe_batch(&mut self, model: &dyn Classifier, batch: &[(&[f64], usize)]) -> Result<()>;

    fn snapshot(&mut self, step: u64) -> Result<()>;
}

/// `lr0 · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Parameter(
            "cosine_lr: total_steps must be > 0".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::Parameter(format!(
            "cosine_lr: step {step} beyond total {total_steps}"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with classic L2 weight decay (`g += wd · θ`) and bias correction.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            axis: "params",
            expected: params.len(),
            found: grads.len(),
        });
    }
    if state.t == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                axis: "param",
                expected: p.len(),
                found: g.len(),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = gj + weight_decay * *theta;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub steps: u64,
    /// SHA-256 over the parameter vector after every optimizer step.
    pub trajectory_digest: [u8; 32],
}

impl TrainOutcome {
    pub fn final_test_acc(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.test_acc)
    }
}

/// Mean cross-entropy gradient over a minibatch.
fn batch_gradients(model: &Cnn8by8, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<Tensor>)> {
    let per_sample: Vec<(f64, Vec<f64>, Vec<Tensor>)> = batch
        .par_iter()
        .map(|&(x, y)| model.loss_and_param_grads(x, y))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let mut loss = 0.0;
    for (l, _, grads) in &per_sample {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.add_assign(g);
        }
    }
    for t in &mut total {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss * scale, total))
}

/// Train `model` in place.
///
/// Runs `epochs × ⌈n / batch_size⌉` Adam steps with a cosine schedule over
/// the whole run. The hook observes every batch before its optimizer step
/// and never touches parameters or optimizer state.
pub fn train(
    model: &mut Cnn8by8,
    train_set: &[Sample],
    test_set: &[Sample],
    config: &TrainConfig,
    mut hook: Option<&mut dyn TrainingHook>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Parameter(
            "train and test sets must be nonempty".into(),
        ));
    }
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut adam = AdamState::default();
    let mut digest = Sha256::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    let mut lr = config.lr0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (&train_set[i].image[..], train_set[i].label))
                .collect();
            if let Some(h) = hook.as_deref_mut() {
                h.observe_batch(model, &batch).map_err(|e| {
                    Error::State(format!("AGOP hook failed at step {}: {e}", step + 1))
                })?;
            }
            let (loss, grads) = batch_gradients(model, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step: step + 1 });
            }
            lr = cosine_lr(step, total_steps, config.lr0)?;
            adam_step(
                &mut model.params_mut(),
                &grads,
                &mut adam,
                lr,
                config.weight_decay,
            )?;
            step += 1;
            for p in model.params() {
                for v in p.data() {
                    digest.update(v.to_le_bytes());
                }
            }
            if step.is_multiple_of(config.snapshot_every) {
                if let Some(h) = hook.as_deref_mut() {
                    h.snapshot(step).map_err(|e| {
                        Error::State(format!("AGOP snapshot failed at step {step}: {e}"))
                    })?;
                }
            }
        }
        let stats = EpochStats {
            epoch,
            train_acc: parallel_accuracy(model, train_set)?,
            test_acc: parallel_accuracy(model, test_set)?,
            lr,
        };
        log::debug!(
            "epoch {epoch}: train {:.4} test {:.4} lr {:.3e}",
            stats.train_acc,
            stats.test_acc,
            stats.lr
        );
        history.push(stats);
    }
    Ok(TrainOutcome {
        history,
        steps: step,
        trajectory_digest: digest.finalize().into(),
    })
}

fn parallel_accuracy(model: &Cnn8by8, data: &[Sample]) -> Result<f64> {
    if data.len() < 256 {
        return evaluate_accuracy(model, data);
    }
    let correct = data
        .par_iter()
        .map(|s| Ok(usize::from(model.predict(&s.image)? == s.label)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Render the accuracy history as CSV (`epoch,train_acc,test_acc,lr`).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_acc,test_acc,lr\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_acc, h.test_acc, h.lr
        ));
    }
    out
}
