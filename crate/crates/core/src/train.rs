//! Plain SGD on the toy shape task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::Ctx;
use crate::data::toy_batch;
use crate::error::{Error, Result};
use crate::model::{build_model, micro_config, Model};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub classes: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch: usize,
    /// Number of distinct training images, cycled in reshuffled epochs.
    pub train_size: usize,
    /// Length of the trailing windows compared for the loss trend.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { classes: 3, steps: 500, lr: 3e-3, seed: 0, batch: 16, train_size: 96, window: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Mean loss over the last `window` steps.
    pub final_loss: f64,
    /// Accuracy over the whole training set after the last step.
    pub train_accuracy: f64,
    /// Mean loss of the last window is at most that of the window before it.
    pub trailing_non_increasing: bool,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of the first `size` toy samples the model classifies correctly.
pub fn toy_accuracy<T: Scalar>(model: &Model<T>, seed: u64, size: usize, classes: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<u64> = (0..size as u64).collect();
    for chunk in idx.chunks(64) {
        let (x, labels) = toy_batch::<T>(seed, chunk, classes);
        let logits = model.forward(&x)?;
        let k = logits.dims()[1];
        for (i, &l) in labels.iter().enumerate() {
            correct += usize::from(argmax(&logits.data()[i * k..(i + 1) * k]) == l);
        }
    }
    Ok(correct as f64 / size.max(1) as f64)
}

/// Trains the micro configuration; `on_step` sees every step's loss.
pub fn train_toy(cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<(Model<f32>, TrainReport)> {
    if cfg.classes == 0 || cfg.batch == 0 || cfg.train_size == 0 {
        return Err(Error::Config("classes, batch and train_size must be positive".into()));
    }
    let mut model = build_model::<f32>(&micro_config(cfg.classes), cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<u64> = (0..cfg.train_size as u64).collect();
    let mut cursor = order.len();
    let lr = cfg.lr as f32;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, labels) = toy_batch::<f32>(cfg.seed, &idx, cfg.classes);

        let mut tape = Tape::new();
        let bound = model.weights.bind(&mut tape, true);
        let xv = tape.constant(x);
        let mut cx = Ctx::new(&mut tape, &bound);
        let logits = model.network.forward(&mut cx, xv, None)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        tape.backward(loss)?;

        let loss_v = tape.value(loss).data()[0] as f64;
        if !loss_v.is_finite() || (step > 0 && loss_v > 10.0 * losses[0]) {
            return Err(Error::Diverged { step, loss: loss_v });
        }
        let lv = tape.value(logits);
        let k = lv.dims()[1];
        let hits = labels.iter().enumerate().filter(|(i, &l)| argmax(&lv.data()[i * k..(i + 1) * k]) == l).count();

        for (i, (_, w)) in model.weights.iter_mut().enumerate() {
            if let Some(g) = tape.grad(bound.vars()[i]) {
                for (p, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        }
        losses.push(loss_v);
        on_step(&StepLog { step, loss: loss_v, batch_accuracy: hits as f64 / labels.len() as f64 });
    }
    let train_accuracy = toy_accuracy(&model, cfg.seed, cfg.train_size, cfg.classes)?;
    let w = cfg.window.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let n = losses.len();
    let last = mean(&losses[n.saturating_sub(w)..]);
    let prev = if n >= 2 * w { mean(&losses[n - 2 * w..n - w]) } else { f64::INFINITY };
    let report = TrainReport {
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: last,
        train_accuracy,
        trailing_non_increasing: last <= prev,
        losses,
    };
    Ok((model, report))
}
