//! Training loop: per epoch, fresh (augmented) samples of every shape,
//! shuffled into batches, one Adam step per batch.

use lazysurf_tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::data::{derive_seed, epoch_samples, TrainSample};
use crate::encoder::CloudIndex;
use crate::error::{Error, Result};
use crate::head::LossParts;
use crate::model::{BatchItem, Model};
use crate::nn::{apply_stat_updates, collect_grads, Ctx, Mode};
use crate::optim::{learning_rate, Adam};
use crate::shapes::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub magnitude: f64,
    pub sign: f64,
    pub regularizer: f64,
}

pub const LOG_HEADER: &str = "epoch,step,lr,total,magnitude,sign,regularizer";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{},{},{},{}",
            self.epoch, self.step, self.lr, self.total, self.magnitude, self.sign, self.regularizer
        )
    }
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
    /// Steps completed.
    pub step: usize,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let optimizer = Adam::from_config(&model.store, &config.train);
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        let t = &self.config.train;
        learning_rate(t.learning_rate, t.lr_halving_epochs as f64, self.epoch as f64)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<LossParts> {
        let indices = batch
            .par_iter()
            .map(|s| CloudIndex::build(&s.cloud, self.model.scales()))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<BatchItem<'_>> = batch
            .iter()
            .zip(&indices)
            .map(|(s, index)| BatchItem {
                index,
                queries: &s.queries,
            })
            .collect();
        let gt: Vec<f64> = batch.iter().flat_map(|s| s.gt.iter().copied()).collect();

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.model.store, Mode::Train, true);
        let loss = self.model.batch_loss(&mut ctx, &items, &gt, &self.config.loss)?;
        let parts = loss.values(&ctx);
        if ![parts.total, parts.magnitude, parts.sign, parts.regularizer]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(self.non_finite(batch, &parts));
        }
        let bound = ctx.bound();
        let updates = ctx.take_updates();
        let mut grads = tape.backward(loss.total)?;
        let grads = collect_grads(&self.model.store, &bound, &mut grads);
        let lr = self.current_lr();
        self.optimizer.step(&mut self.model.store, &grads, lr)?;
        apply_stat_updates(&mut self.model.store, &updates, self.config.model.bn_momentum);
        Ok(parts)
    }

    fn non_finite(&self, batch: &[TrainSample], parts: &LossParts) -> Error {
        let bad_params: Vec<&str> = self
            .model
            .store
            .entries()
            .iter()
            .filter(|e| e.value.data().iter().any(|v| !v.is_finite()))
            .map(|e| e.name.as_str())
            .collect();
        let gt_range = batch
            .iter()
            .flat_map(|s| s.gt.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
        let detail = format!(
            "loss {parts:?}; batch of {} clouds ({} points, {} queries each); gt range [{}, {}]; \
             scales {:?}; rotations {:?}; non-finite parameters {:?}",
            batch.len(),
            batch.first().map_or(0, |s| s.cloud.len()),
            batch.first().map_or(0, |s| s.queries.len()),
            gt_range.0,
            gt_range.1,
            batch.iter().map(|s| s.transform.scale).collect::<Vec<_>>(),
            batch.iter().map(|s| s.rotation.as_slice().to_vec()).collect::<Vec<_>>(),
            bad_params
        );
        Error::NonFiniteLoss {
            epoch: self.epoch,
            step: self.step,
            detail,
        }
    }

    /// Runs one epoch over `shapes` and returns its log rows.
    pub fn run_epoch(&mut self, shapes: &[Shape]) -> Result<Vec<LogRow>> {
        if shapes.is_empty() {
            return Err(Error::EmptyInput);
        }
        let samples = epoch_samples(shapes, &self.config.data, self.config.seed, self.epoch)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[self.epoch as u64, 0xBA7C])));
        let mut rows = Vec::new();
        for chunk in order.chunks(self.config.train.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let lr = self.current_lr();
            let parts = self.train_step(&batch)?;
            let row = LogRow {
                epoch: self.epoch,
                step: self.step,
                lr,
                total: parts.total,
                magnitude: parts.magnitude,
                sign: parts.sign,
                regularizer: parts.regularizer,
            };
            self.step += 1;
            rows.push(row);
        }
        self.epoch += 1;
        self.log.extend_from_slice(&rows);
        Ok(rows)
    }

    /// Trains until `config.train.epochs`; `after_epoch` runs after each
    /// epoch (checkpointing, progress).
    pub fn fit<F>(&mut self, shapes: &[Shape], mut after_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while self.epoch < self.config.train.epochs {
            self.run_epoch(shapes)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}
