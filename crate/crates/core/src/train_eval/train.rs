use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ForwardOptions, Model};
use super::{loss_from_sums, rate_loss, TrainConfig};
use crate::autodiff::{Adam, Mode, ParamSet, PlateauScheduler, Tape};
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;
use crate::sysmodel::ChannelSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

/// Everything besides tensors needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Completed epochs.
    pub epoch: usize,
    pub scheduler: PlateauScheduler,
    #[serde(with = "crate::container::json_f64")]
    pub best_val: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub history: Vec<EpochRecord>,
}

/// Independent stream seed for item `index` of a run seeded with `seed`
/// (an epoch, a dataset sample, a fallback draw). Epoch streams derived
/// this way make a resumed run draw the same numbers as an uninterrupted
/// one.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct Trainer {
    pub model: Model,
    pub best: ParamSet,
    pub adam: Adam,
    pub progress: TrainProgress,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let scheduler = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.lr_floor)?;
        Ok(Self {
            best: model.params.clone(),
            adam: Adam::new(&model.params),
            model,
            progress: TrainProgress {
                epoch: 0,
                scheduler,
                best_val: f64::INFINITY,
                best_epoch: 0,
                bad_epochs: 0,
                history: Vec::new(),
            },
            cfg,
        })
    }

    pub fn is_done(&self) -> bool {
        self.progress.epoch >= self.cfg.max_epochs || self.progress.bad_epochs >= self.cfg.early_stop_patience
    }

    pub fn stopped_early(&self) -> bool {
        self.progress.bad_epochs >= self.cfg.early_stop_patience
    }

    /// Eval-mode loss over `samples`, batched by the training batch size.
    pub fn validation_loss(&self, samples: &[ChannelSample]) -> Result<f64> {
        validation_loss(&self.model, samples, self.cfg.batch_size)
    }

    /// One pass over `train` in a seeded random order, then validation,
    /// the plateau schedule and the early-stopping bookkeeping.
    pub fn run_epoch(&mut self, train: &[ChannelSample], val: &[ChannelSample]) -> Result<EpochRecord> {
        let epoch = self.progress.epoch;
        let lr = self.progress.scheduler.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&ChannelSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new(Mode::Train);
            let bound = self.model.params.bind(&mut tape);
            let mut ctx = ForwardCtx::new(&mut rng);
            let out = self
                .model
                .forward(&mut tape, &bound, &batch, &mut ctx, ForwardOptions::default())
                .and_then(|out| rate_loss(&mut tape, out.g, out.w, &self.model.cfg))
                .map_err(|e| diagnose(e, epoch, bi, lr))?;
            let loss = out.0;
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            let grads = self.model.params.collect_grads(&bound, &grads);
            ctx.commit_running_stats(&mut self.model.params);
            self.adam
                .step(&mut self.model.params, &grads, lr)
                .map_err(|e| diagnose(e, epoch, bi, lr))?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::Training("training split has fewer than two samples".into()));
        }

        let val_loss = self.validation_loss(val)?;
        self.progress.scheduler.observe(val_loss);
        if val_loss < self.progress.best_val {
            self.progress.best_val = val_loss;
            self.progress.best_epoch = epoch;
            self.progress.bad_epochs = 0;
            self.best = self.model.params.clone();
        } else {
            self.progress.bad_epochs += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            lr,
        };
        self.progress.history.push(record.clone());
        self.progress.epoch += 1;
        log::debug!(
            "{} epoch {epoch}: train {:.6} val {:.6} lr {lr:.2e}",
            self.model.method,
            record.train_loss,
            val_loss
        );
        Ok(record)
    }

    /// Runs epochs until the schedule ends or `until` epochs have completed,
    /// calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        train: &[ChannelSample],
        val: &[ChannelSample],
        until: Option<usize>,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() && until.is_none_or(|u| self.progress.epoch < u) {
            let rec = self.run_epoch(train, val)?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    /// The model with the parameters of the best validation epoch.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        m.params = self.best.clone();
        m
    }
}

fn diagnose(e: Error, epoch: usize, batch: usize, lr: f64) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch}, batch {batch}, lr {lr:.3e})")),
        other => other,
    }
}

pub fn validation_loss(model: &Model, samples: &[ChannelSample], batch_size: usize) -> Result<f64> {
    let sums = eval_sums(model, samples, batch_size)?;
    loss_from_sums(&sums)
}

/// Eval-mode weighted sum-rates through the training graph.
pub(crate) fn eval_sums(model: &Model, samples: &[ChannelSample], batch_size: usize) -> Result<Vec<f64>> {
    let mut sums = Vec::with_capacity(samples.len());
    // eval mode draws nothing from the stream
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&ChannelSample> = chunk.iter().collect();
        let mut tape = Tape::new(Mode::Eval);
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::new(&mut rng);
        let out = model.forward(&mut tape, &bound, &batch, &mut ctx, ForwardOptions::default())?;
        let (_, s) = rate_loss(&mut tape, out.g, out.w, &model.cfg)?;
        sums.extend_from_slice(tape.value(s).data());
    }
    Ok(sums)
}

/// Fits input statistics on `train`, trains to completion and returns the
/// best-validation model with the epoch history.
pub fn train(
    mut model: Model,
    train: &[ChannelSample],
    val: &[ChannelSample],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochRecord>)> {
    model.fit_input_stats(train)?;
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(train, val, None, |_, _| Ok(()))?;
    Ok((t.best_model(), t.progress.history))
}
