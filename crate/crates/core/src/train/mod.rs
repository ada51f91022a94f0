//! RMSProp training with intermediate supervision, plateau learning-rate
//! schedule, validation, checkpoints and resumption.

mod optim;
mod probe;
mod runlog;
mod schedule;

pub use optim::{rmsprop_step, RmsProp};
pub use probe::{context_probe, matched_without_context, ContextProbe, ProbeArm};
pub use runlog::{EpochRecord, RunLog};
pub use schedule::{epochs_without_improvement, lr_schedule, PlateauConfig};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ArrayKind, Checkpoint, NamedArray};
use crate::data::{AffineTransform, AugmentParams, Dataset, Image};
use crate::error::{Error, Result};
use crate::losses::{training_loss_on_tape, LossConfig, Supervision, TruthBatch};
use crate::metrics::{pck, MetricConfig};
use crate::nn::{Ctx, Mode, BN_MOMENTUM};
use crate::tensor::{Float, Tensor};
use crate::{Model, ModelConfig, Pose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: Float,
    /// Total number of epochs; a resumed run continues up to this count.
    pub epochs: usize,
    pub seed: u64,
    pub rho: Float,
    pub eps: Float,
    pub plateau_factor: Float,
    pub plateau_patience: usize,
    pub plateau_min_delta: Float,
    pub min_lr: Float,
    pub lambda_p: Float,
    pub supervision: Supervision,
    /// Maximum rotation in degrees; 0 disables rotation.
    pub rotation_range: Float,
    /// Rescaling interval; `[1, 1]` disables rescaling.
    pub scale_range: (Float, Float),
    /// Fraction of a single dataset carved out for validation.
    pub val_fraction: Float,
    /// Stop once validation PCK reaches this fraction.
    pub target_pck: Option<Float>,
    /// Where `best/`, `last/` and `runlog.jsonl` are written.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            initial_lr: 1e-3,
            epochs: 30,
            seed: 0,
            rho: 0.9,
            eps: 1e-8,
            plateau_factor: 0.4,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            min_lr: 1e-7,
            lambda_p: 0.01,
            supervision: Supervision::Aggregated,
            rotation_range: 40.0,
            scale_range: (0.7, 1.3),
            val_fraction: 0.1,
            target_pck: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic desk-scale dataset.
    pub fn desk() -> Self {
        TrainConfig {
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) || !(self.eps >= 0.0) {
            return bad("rho must lie in [0, 1) and eps must be non-negative");
        }
        if !(self.lambda_p >= 0.0) || !(self.min_lr > 0.0) {
            return bad("lambda_p must be non-negative and min_lr positive");
        }
        self.augment_params(0).validate()
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            rho: self.rho,
            eps: self.eps,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            min_delta: self.plateau_min_delta,
            min_lr: self.min_lr,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_p: self.lambda_p,
            supervision: self.supervision,
        }
    }

    fn augment_params(&self, seed: u64) -> AugmentParams {
        AugmentParams {
            rotation_range: self.rotation_range,
            scale_range: self.scale_range,
            seed,
        }
    }
}

/// Optimizer and schedule state carried between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub lr: Float,
    /// Validation scores since the last learning-rate reduction.
    pub plateau_history: Vec<Float>,
    pub best_score: Option<Float>,
    /// RMSProp squared-gradient averages, one per parameter.
    pub velocity: Vec<Vec<Float>>,
}

impl TrainState {
    fn fresh(model: &Model, cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            lr: cfg.initial_lr,
            plateau_history: Vec::new(),
            best_score: None,
            velocity: model.store().params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

const VELOCITY_PREFIX: &str = "rmsprop.v.";

fn encode<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain values serialize")
}

fn decode<T: serde::de::DeserializeOwned>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing training state {key:?}")))?;
    serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad training state {key:?}: {e}")))
}

/// Checkpoint of the model together with the optimizer and schedule state.
pub fn training_checkpoint(model: &Model, state: &TrainState) -> Checkpoint {
    let mut ckpt = model.to_checkpoint();
    for ((name, t), v) in model.store().params().iter().zip(&state.velocity) {
        ckpt.arrays.push(NamedArray {
            name: format!("{VELOCITY_PREFIX}{name}"),
            kind: ArrayKind::State,
            tensor: Tensor::new(t.shape().to_vec(), v.clone()).expect("velocity matches parameter"),
        });
    }
    ckpt.meta.insert("epoch".into(), state.epoch.to_string());
    ckpt.meta.insert("lr".into(), encode(&state.lr));
    ckpt.meta.insert("plateau_history".into(), encode(&state.plateau_history));
    ckpt.meta.insert("best_score".into(), encode(&state.best_score));
    ckpt
}

/// Restores the model and training state written by [`training_checkpoint`].
pub fn restore_training(ckpt: &Checkpoint) -> Result<(Model, TrainState)> {
    let model = Model::from_checkpoint(ckpt)?;
    let velocity: Vec<Vec<Float>> = model
        .store()
        .params()
        .iter()
        .map(|(name, t)| {
            let key = format!("{VELOCITY_PREFIX}{name}");
            ckpt.arrays_of(ArrayKind::State)
                .find(|a| a.name == key && a.tensor.shape() == t.shape())
                .map(|a| a.tensor.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))
        })
        .collect::<Result<_>>()?;
    let state = TrainState {
        epoch: decode(&ckpt.meta, "epoch")?,
        lr: decode(&ckpt.meta, "lr")?,
        plateau_history: decode(&ckpt.meta, "plateau_history")?,
        best_score: decode(&ckpt.meta, "best_score")?,
        velocity,
    };
    Ok((model, state))
}

/// Fraction of visible joints within the metric threshold, using the final block.
pub fn validation_score(model: &Model, data: &Dataset, metric: &MetricConfig) -> Result<Float> {
    let preds = predict_dataset(model, data)?;
    Ok(pck(&preds, &data.poses, metric)?.fraction())
}

const EVAL_BATCH: usize = 32;

/// Final-block poses for every sample.
pub fn predict_dataset(model: &Model, data: &Dataset) -> Result<Vec<Pose>> {
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        for set in model.predict_batch(&data.batch_images(chunk)?)? {
            out.push(set.final_pose().clone());
        }
    }
    Ok(out)
}

/// Fraction of visible ground-truth joints whose final-block detection map
/// peaks within `cells` (Euclidean, in map cells) of the cell whose ramp
/// coordinate is nearest the true location.
pub fn heatmap_localization(model: &Model, data: &Dataset, cells: Float) -> Result<Float> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in indices.chunks(EVAL_BATCH) {
        let sets = model.predict_batch(&data.batch_images(chunk)?)?;
        for (set, &i) in sets.iter().zip(chunk) {
            let maps = &set.blocks.last().expect("at least one block").heatmaps.detection;
            let r = maps.shape()[1];
            let truth = &data.poses[i];
            for (j, (p, &vis)) in truth.joints.iter().zip(&truth.visibility).enumerate() {
                if !vis {
                    continue;
                }
                let map = maps.index_first(j);
                let peak = map
                    .data()
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &v)| if v > map.data()[best] { k } else { best });
                let (pr, pc) = ((peak / r) as Float, (peak % r) as Float);
                let cell = |c: Float| ((c * r as Float).round() - 1.0).clamp(0.0, (r - 1) as Float);
                let (tc, tr) = (cell(p[0]), cell(p[1]));
                total += 1;
                if (pc - tc).hypot(pr - tr) <= cells {
                    hits += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as Float / total as Float })
}

/// Epoch-by-epoch training of one model.
pub struct Trainer<'a> {
    model: Model,
    cfg: TrainConfig,
    state: TrainState,
    train: &'a Dataset,
    val: &'a Dataset,
    metric: MetricConfig,
    log: RunLog,
    best: Option<Checkpoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, cfg: TrainConfig, train: &'a Dataset, val: &'a Dataset, metric: MetricConfig) -> Result<Self> {
        let state = TrainState::fresh(&model, &cfg);
        Self::with_state(model, state, cfg, train, val, metric)
    }

    /// Continues from a checkpoint written during an earlier run.
    pub fn resume(
        ckpt: &Checkpoint,
        cfg: TrainConfig,
        train: &'a Dataset,
        val: &'a Dataset,
        metric: MetricConfig,
    ) -> Result<Self> {
        let (model, state) = restore_training(ckpt)?;
        Self::with_state(model, state, cfg, train, val, metric)
    }

    fn with_state(
        model: Model,
        state: TrainState,
        cfg: TrainConfig,
        train: &'a Dataset,
        val: &'a Dataset,
        metric: MetricConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        metric.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mc = model.config();
        for d in [train, val] {
            if let Some(s) = d.image_size().filter(|&s| s != mc.input_size) {
                return Err(Error::Config(format!("images are {s}px but the model expects {}px", mc.input_size)));
            }
            if let Some(n) = d.num_joints().filter(|&n| n != mc.num_joints) {
                return Err(Error::JointCount {
                    expected: mc.num_joints,
                    got: n,
                });
            }
        }
        Ok(Trainer {
            model,
            cfg,
            state,
            train,
            val,
            metric,
            log: RunLog::default(),
            best: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    /// Current model and training state as a checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        training_checkpoint(&self.model, &self.state)
    }

    /// Checkpoint of the epoch with the best validation score so far in this run.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    fn epoch_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(2 * self.state.epoch as u64 + stream);
        rng
    }

    fn prepare_batch(&self, indices: &[usize], seeds: &[u64]) -> Result<(Tensor, Vec<Pose>)> {
        let identity = self.cfg.augment_params(0).is_identity();
        if identity {
            return Ok((self.train.batch_images(indices)?, indices.iter().map(|&i| self.train.poses[i].clone()).collect()));
        }
        let items: Vec<(Tensor, Pose)> = indices
            .par_iter()
            .zip(seeds)
            .map(|(&i, &seed)| {
                let tf: AffineTransform = crate::data::sample_augmentation(&self.cfg.augment_params(seed))?;
                let img = tf.warp_image(&Image::from_tensor(&self.train.images[i])?)?;
                Ok((img.to_tensor(), tf.warp_pose(&self.train.poses[i])))
            })
            .collect::<Result<_>>()?;
        let (images, poses): (Vec<Tensor>, Vec<Pose>) = items.into_iter().unzip();
        Ok((Tensor::stack(&images)?, poses))
    }

    /// One optimizer step; returns the batch loss breakdown.
    fn step(&mut self, images: Tensor, poses: &[Pose], batch: usize) -> Result<crate::losses::LossReport> {
        let loss_cfg = self.cfg.loss();
        let truth = TruthBatch::new(&poses.iter().collect::<Vec<_>>(), self.model.config().num_context)?;
        let (grads, updates, report) = {
            let mut ctx = Ctx::new(self.model.store(), Mode::Train, true);
            let x = ctx.tape.constant(images)?;
            let outputs = self.model.forward(&mut ctx, x)?;
            let (loss, report) = training_loss_on_tape(&mut ctx.tape, &outputs, &truth, &loss_cfg, None)?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.state.epoch,
                    batch,
                });
            }
            ctx.tape.backward(loss).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFiniteGradient(format!("in {op} at epoch {} batch {batch}", self.state.epoch)),
                other => other,
            })?;
            (ctx.param_grads(), ctx.into_updates(), report)
        };
        let names = self.model.store().params();
        if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient(format!(
                "{} at epoch {} batch {batch}",
                names[k].0, self.state.epoch
            )));
        }
        let opt = self.cfg.optimizer();
        let lr = self.state.lr;
        for ((p, g), v) in self.model.store_mut().param_values_mut().zip(&grads).zip(&mut self.state.velocity) {
            rmsprop_step(p.data_mut(), g, v, lr, &opt)?;
        }
        self.model.store_mut().apply_batch_stats(&updates, BN_MOMENTUM);
        Ok(report)
    }

    /// Trains one epoch, validates, updates the schedule and returns the log entry.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.epoch_rng(0));
        let mut aug_rng = self.epoch_rng(1);
        let seeds: Vec<u64> = (0..order.len()).map(|_| aug_rng.gen()).collect();
        let lr = self.state.lr;
        let (mut coord, mut prob, mut total) = (0.0, 0.0, 0.0);
        let batches = order.len().div_ceil(self.cfg.batch_size);
        for b in 0..batches {
            let lo = b * self.cfg.batch_size;
            let hi = (lo + self.cfg.batch_size).min(order.len());
            let (images, poses) = self.prepare_batch(&order[lo..hi], &seeds[lo..hi])?;
            let report = self.step(images, &poses, b)?;
            coord += report.coordinate_loss;
            prob += report.probability_loss;
            total += report.total;
        }
        let val_pck = if self.val.is_empty() {
            None
        } else {
            Some(validation_score(&self.model, self.val, &self.metric)?)
        };
        let epoch = self.state.epoch;
        self.state.epoch += 1;
        if let Some(score) = val_pck {
            self.state.plateau_history.push(score);
            let next = lr_schedule(&self.state.plateau_history, lr, &self.cfg.plateau());
            if next < lr {
                self.state.plateau_history.clear();
            }
            self.state.lr = next;
            if self.state.best_score.is_none_or(|b| score > b) {
                self.state.best_score = Some(score);
                self.best = Some(self.checkpoint());
            }
        }
        let n = batches as Float;
        let record = EpochRecord {
            epoch,
            lr,
            coordinate_loss: coord / n,
            probability_loss: prob / n,
            total_loss: total / n,
            val_pck,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        self.log.entries.push(record.clone());
        self.persist(&record)?;
        Ok(record)
    }

    fn persist(&self, record: &EpochRecord) -> Result<()> {
        let Some(dir) = &self.cfg.output_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        self.checkpoint().save(&dir.join("last"))?;
        if let Some(best) = &self.best {
            if best.meta.get("epoch") == Some(&self.state.epoch.to_string()) {
                best.save(&dir.join("best"))?;
            }
        }
        RunLog::append(&dir.join("runlog.jsonl"), record)
    }

    /// Whether the configured epoch count or PCK target has been reached.
    pub fn finished(&self) -> bool {
        let reached = match (self.cfg.target_pck, self.log.entries.last().and_then(|r| r.val_pck)) {
            (Some(target), Some(score)) => score >= target,
            _ => false,
        };
        reached || self.state.epoch >= self.cfg.epochs
    }

    /// Runs epochs until [`Trainer::finished`], calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        if self.state.epoch == 0 {
            if let Some(dir) = &self.cfg.output_dir {
                self.checkpoint().save(&dir.join("last"))?;
            }
        }
        while !self.finished() {
            let record = self.run_epoch()?;
            on_epoch(&record);
        }
        Ok(())
    }
}

/// Builds a model from `model_cfg`, trains it and returns the final
/// checkpoint (with optimizer state) and the run log.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    metric: &MetricConfig,
) -> Result<(Checkpoint, RunLog)> {
    let model = Model::new(model_cfg.clone())?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), train, val, metric.clone())?;
    trainer.run(|_| {})?;
    Ok((trainer.checkpoint(), trainer.log.clone()))
}
