//! Mini-batch training of the adapter side of a partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::eval::{evaluate, Metrics};
use crate::harness::optim::{AdamW, OptimizerConfig};
use crate::harness::partition::{self, ParamPartition, TrainMode};
use crate::model::{BatchInputs, SlgNet};
use crate::params::Session;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_token_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: u64,
    pub params_total: usize,
    pub params_trainable: usize,
    pub initial: Metrics,
    pub epochs: Vec<EpochLog>,
    #[serde(rename = "final")]
    pub final_metrics: Metrics,
}

/// Optimizer state bound to one model and mode.
pub struct Trainer {
    pub mode: TrainMode,
    pub partition: ParamPartition,
    pub optimizer: AdamW,
    config: OptimizerConfig,
}

impl Trainer {
    pub fn new(model: &mut SlgNet, mode: TrainMode, config: OptimizerConfig) -> Result<Self> {
        let part = partition::partition(model, mode)?;
        partition::apply(&mut model.store, &part);
        let optimizer = AdamW::new(config.clone(), &model.store, &part)?;
        Ok(Self { mode, partition: part, optimizer, config })
    }

    /// One forward/backward/update on a batch; returns the batch loss.
    pub fn step(&mut self, model: &mut SlgNet, inputs: &BatchInputs, targets: &[f64]) -> Result<f64> {
        let grads = {
            let mut s = Session::new(&model.store);
            let logits = model.forward(&mut s, inputs, self.mode.pathways())?;
            let loss = s.tape.bce_with_logits(logits, targets)?;
            let value = s.tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged to {value}")));
            }
            (s.backward(loss)?, value)
        };
        model.store.accumulate(&grads.0)?;
        self.optimizer.step(&mut model.store)?;
        Ok(grads.1)
    }

    /// One pass over `data` in a seeded random order; returns the mean loss.
    pub fn epoch(&mut self, model: &mut SlgNet, data: &Dataset, epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let (inputs, targets) = data.batch(chunk)?;
            total += self.step(model, &inputs, &targets)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

/// Trains for `config.epochs` epochs, evaluating on `val` after each.
pub fn train(model: &mut SlgNet, mode: TrainMode, config: &OptimizerConfig, train_set: &Dataset, val: &Dataset) -> Result<TrainingReport> {
    let mut trainer = Trainer::new(model, mode, config.clone())?;
    let paths = mode.pathways();
    let initial = evaluate(model, val, paths, config.batch_size)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut last = initial.clone();
    for e in 0..config.epochs {
        let train_loss = trainer.epoch(model, train_set, e)?;
        last = evaluate(model, val, paths, config.batch_size)?;
        epochs.push(EpochLog { epoch: e + 1, train_loss, val_loss: last.loss, val_token_ap: last.token_ap });
    }
    Ok(TrainingReport {
        mode,
        seed: config.seed,
        steps: trainer.optimizer.steps(),
        params_total: trainer.partition.params_total(),
        params_trainable: trainer.partition.params_trainable(),
        initial,
        epochs,
        final_metrics: last,
    })
}
