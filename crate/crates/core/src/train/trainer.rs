//! Deterministic mini-batch training.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::GtBox;
use crate::data::{stack_images, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::model::DtNetModel;
use crate::nn::{apply_bn_updates, Ctx};
use crate::ops::Mode;
use crate::train::loss::{LossBreakdown, LossWeights};
use crate::train::optim::{sgd_step, OptimState, SgdConfig};
use crate::train::schedule::{one_cycle_lr, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps; the schedule spans the capped length.
    pub max_steps: Option<usize>,
    pub max_lr: f64,
    pub warm_fraction: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub sgd: SgdConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    /// Probability of mirroring each training image.
    pub hflip: f64,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = LrSchedule::new(0);
        Self {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            max_steps: None,
            max_lr: s.max_lr,
            warm_fraction: s.warm_fraction,
            div_factor: s.div_factor,
            final_div: s.final_div,
            sgd: SgdConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
            eval_every: 1,
            hflip: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(samples);
        self.max_steps.map_or(full, |cap| full.min(cap))
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        LrSchedule {
            max_lr: self.max_lr,
            warm_fraction: self.warm_fraction,
            div_factor: self.div_factor,
            final_div: self.final_div,
            total_steps: self.total_steps(samples),
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
    pub map50: Option<f64>,
    pub map5095: Option<f64>,
}

/// Append-only JSON-lines metric sink.
pub struct MetricLog {
    out: BufWriter<File>,
}

impl MetricLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

fn diverged(step: usize, reason: impl Into<String>) -> Error {
    Error::Diverged {
        step,
        reason: reason.into(),
    }
}

/// One optimizer step on the batch `idx`; returns the pre-update loss.
fn train_step(
    model: &mut DtNetModel<f32>,
    batch: &[Sample],
    cfg: &TrainConfig,
    opt: &mut OptimState<f32>,
    lr: f64,
    step: usize,
) -> Result<LossBreakdown> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let images = stack_images(batch, &idx)?;
    let targets: Vec<Vec<GtBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
    let mut ctx = Ctx::training(&model.params, Mode::Train);
    let x = ctx.input(images);
    let raw = model.forward(&mut ctx, x)?;
    let (loss, breakdown) = ctx.graph.detection_loss(raw, &targets, &model.config, &cfg.loss)?;
    if !breakdown.is_finite() {
        return Err(diverged(step, format!("non-finite loss {breakdown:?}")));
    }
    let grads = ctx.graph.backward(loss)?;
    let param_grads = ctx.param_grads(&grads);
    let bn = ctx.take_bn_updates();
    drop(ctx);
    if let Some((name, _)) = param_grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(diverged(step, format!("non-finite gradient for {name}")));
    }
    sgd_step(&mut model.params, &param_grads, opt, lr)?;
    apply_bn_updates(&mut model.params, bn)?;
    Ok(breakdown)
}

/// Trains `model` in place. `on_epoch` sees every record as it is produced.
pub fn train_loop(
    model: &mut DtNetModel<f32>,
    train: &[Sample],
    eval_set: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.hflip) {
        return Err(Error::Config(format!("flip probability {} outside [0, 1]", cfg.hflip)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let schedule = cfg.schedule(train.len());
    let total = schedule.total_steps;
    let mut opt = OptimState::new(cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            lr = one_cycle_lr(step, &schedule);
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if rng.random_bool(cfg.hflip) {
                        train[i].hflip()
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let b = train_step(model, &batch, cfg, &mut opt, lr, step)?;
            sum.box_loss += b.box_loss;
            sum.obj += b.obj;
            sum.cls += b.cls;
            sum.total += b.total;
            batches += 1;
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs || step >= total;
        let (map50, map5095) = match eval_set {
            Some(set) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) => {
                let r = evaluate(model, set, &cfg.eval)?;
                (Some(r.map50), Some(r.map5095))
            }
            _ => (None, None),
        };
        let n = batches as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            box_loss: sum.box_loss / n,
            obj: sum.obj / n,
            cls: sum.cls / n,
            total: sum.total / n,
            map50,
            map5095,
        };
        on_epoch(&rec)?;
        log.push(rec);
    }
    Ok(log)
}
