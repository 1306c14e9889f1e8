use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{featurize_batch, Float};
use crate::error::{Error, Result};
use crate::recovery::top_n;
use crate::rng::{derived_rng, stream};
use crate::sysmodel::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Checkpoint spacing in optimizer steps.
    pub eval_every: u64,
    /// Validation samples scored at each checkpoint (taken from the front).
    pub val_subset: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 250,
            epochs: 1,
            eval_every: 100,
            val_subset: 1000,
            seed: 2018,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Optimizer steps taken when the checkpoint was recorded.
    pub batch: u64,
    /// Mean training loss over the steps since the previous checkpoint.
    pub loss: f64,
    pub user_hit_ratio: f64,
    pub exact_set_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// Mean loss of the last `window` checkpoints.
    pub fn smoothed_final_loss(&self, window: usize) -> Option<f64> {
        let n = self.checkpoints.len().min(window.max(1));
        if n == 0 {
            return None;
        }
        let tail = &self.checkpoints[self.checkpoints.len() - n..];
        Some(tail.iter().map(|c| c.loss).sum::<f64>() / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopReason {
    Completed,
    Interrupted,
    Diverged { batch: u64, loss: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Best-validation parameters (the final ones if no checkpoint was taken).
    pub network: Network<T>,
    pub trace: TrainingTrace,
    pub stop: StopReason,
}

fn check_samples(network: &Network<impl Float>, samples: &[Sample], what: &str) -> Result<()> {
    for s in samples {
        if s.y.len() * 2 != network.input_width {
            return Err(Error::Shape(format!(
                "{what} measurement length {} does not match the network ({})",
                s.y.len(),
                network.measurement_len()
            )));
        }
        if s.active_set.iter().any(|&k| k >= network.users) {
            return Err(Error::Shape(format!("{what} sample refers to a user beyond K = {}", network.users)));
        }
    }
    Ok(())
}

fn features<T: Float>(samples: &[Sample], m: usize) -> Array2<T> {
    featurize_batch(samples.iter().map(|s| s.y.as_slice()), m)
}

/// `(user_hit_ratio, exact_set_rate)` when every sample is given its true
/// number of active users.
pub fn evaluate<T: Float>(network: &Network<T>, samples: &[Sample]) -> Result<(f64, f64)> {
    check_samples(network, samples, "evaluation")?;
    if samples.is_empty() {
        return Ok((1.0, 1.0));
    }
    let mut hits = 0.0;
    let mut exact = 0usize;
    for chunk in samples.chunks(1024) {
        let scores = network.predict_scores(features::<T>(chunk, network.measurement_len()).view())?;
        for (row, sample) in scores.rows().into_iter().zip(chunk) {
            let n = sample.active_set.len();
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let detected = top_n(&row, n);
            if n == 0 {
                hits += 1.0;
            } else {
                let found = detected.iter().filter(|k| sample.active_set.binary_search(k).is_ok()).count();
                hits += found as f64 / n as f64;
            }
            if detected == sample.active_set {
                exact += 1;
            }
        }
    }
    let t = samples.len() as f64;
    Ok((hits / t, exact as f64 / t))
}

/// Mini-batch SGD with momentum. The sample order of every epoch is drawn
/// from a stream keyed by the step count at the epoch start, so a resumed
/// run does not replay the shuffles of the run it continues.
pub fn train<T: Float>(
    mut network: Network<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    stop: Option<&AtomicBool>,
    mut on_checkpoint: impl FnMut(&Checkpoint),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_samples(&network, train_set, "training")?;
    check_samples(&network, val_set, "validation")?;
    if train_set.is_empty() && config.epochs > 0 {
        return Err(Error::config("training set is empty"));
    }
    let m = network.measurement_len();
    let inputs = features::<T>(train_set, m);
    let mut targets = Array2::zeros((train_set.len(), network.users));
    for (mut row, s) in targets.rows_mut().into_iter().zip(train_set) {
        row.assign(&network.head.target::<T>(network.users, &s.active_set));
    }
    let val = &val_set[..val_set.len().min(config.val_subset)];

    let mut trace = TrainingTrace::default();
    let mut best: Option<(f64, f64, Network<T>)> = None;
    let mut window_loss = 0.0;
    let mut window_steps = 0u64;
    let mut outcome_stop = StopReason::Completed;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for _ in 0..config.epochs {
        let mut rng = derived_rng(config.seed, stream::SHUFFLE, network.batches_seen);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if batch.len() == 1 && config.batch_size > 1 {
                continue;
            }
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                outcome_stop = StopReason::Interrupted;
                break 'epochs;
            }
            let x = inputs.select(Axis(0), batch);
            let t = targets.select(Axis(0), batch);
            let (loss, grads) = network.loss_and_grads(x.view(), t.view())?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                outcome_stop = StopReason::Diverged { batch: network.batches_seen + 1, loss };
                break 'epochs;
            }
            network.apply_momentum_step(&grads, config.learning_rate, config.momentum);
            window_loss += loss;
            window_steps += 1;

            if network.batches_seen % config.eval_every == 0 {
                let (hit, exact) = evaluate(&network, val)?;
                let cp = Checkpoint {
                    batch: network.batches_seen,
                    loss: window_loss / window_steps as f64,
                    user_hit_ratio: hit,
                    exact_set_rate: exact,
                };
                window_loss = 0.0;
                window_steps = 0;
                trace.checkpoints.push(cp);
                on_checkpoint(&cp);
                let better = match &best {
                    None => true,
                    Some((e, h, _)) => (exact, hit) > (*e, *h),
                };
                if better {
                    best = Some((exact, hit, network.clone()));
                }
            }
        }
    }

    let steps = network.batches_seen;
    let mut chosen = match best {
        Some((_, _, net)) => net,
        None => network,
    };
    chosen.batches_seen = steps;
    Ok(TrainOutcome { network: chosen, trace, stop: outcome_stop })
}
