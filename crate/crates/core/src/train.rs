//! Optimization loop: per-sample gradients summed in a fixed order, Adam,
//! cosine learning-rate decay.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevhead::GtRasters;
use crate::config::TrainConfig;
use crate::data::rasterize_gt;
use crate::distill::TeacherFeatureSource;
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::lane::Lane3D;
use crate::model::{to_virtual_view, LossBreakdown, Model, Targets};
use crate::network::Mode;
use crate::nn::{Adam, Tape, Tensor};
use crate::raster::Raster;

/// Environment variable that switches logs and outputs to deterministic mode.
pub const DETERMINISTIC_ENV: &str = "DEPTH3DLANE_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

/// A training sample already warped into the virtual view.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: Raster,
    pub targets: Targets,
}

impl TrainSample {
    pub fn new(
        model: &Model,
        id: impl Into<String>,
        image: &Raster,
        depth: Option<&Raster>,
        lanes: &[Lane3D],
        rig: &CameraRig,
        teacher: Option<&dyn TeacherFeatureSource>,
    ) -> Result<TrainSample> {
        let (image, depth) = to_virtual_view(image, depth, rig, model.virtual_rig())?;
        let gt: GtRasters = rasterize_gt(lanes, model.grid());
        let teacher = match teacher {
            Some(t) if model.config().distill_on => Some(t.features(&image)?),
            _ => None,
        };
        Ok(TrainSample {
            id: id.into(),
            image,
            targets: Targets { gt, depth, teacher },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub logs: Vec<StepLog>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.logs.first().map(|l| l.loss.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.logs.last().map(|l| l.loss.total)
    }
}

pub fn total_steps(cfg: &TrainConfig, samples: usize) -> usize {
    let per_epoch = samples.div_ceil(cfg.batch_size.max(1));
    let n = cfg.epochs * per_epoch;
    if cfg.max_steps > 0 {
        n.min(cfg.max_steps)
    } else {
        n
    }
}

pub fn cosine_lr(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.lr;
    }
    let t = step as f64 / (total - 1) as f64;
    cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Loss and dense parameter gradients of one sample.
pub fn sample_gradients(model: &Model, s: &TrainSample, cfg: &TrainConfig) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &s.image, Mode::Train)?;
    let (loss, b) = model.training_loss(&mut tape, &fwd, &s.targets, &cfg.weights, cfg.distill_loss_on)?;
    let grads = tape.backward(loss).into_dense(model.store());
    Ok((b, grads))
}

/// Mean loss over `samples` at the current weights.
pub fn evaluate_loss(model: &Model, samples: &[TrainSample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let k = 1.0 / samples.len().max(1) as f64;
    for s in samples {
        let mut tape = Tape::inference();
        let fwd = model.forward(&mut tape, &s.image, Mode::Train)?;
        let (_, b) = model.training_loss(&mut tape, &fwd, &s.targets, &cfg.weights, cfg.distill_loss_on)?;
        acc.accumulate(&b, k);
    }
    Ok(acc)
}

/// Train in place. Batch order is a pure function of `seed`; `on_step` sees
/// every logged step.
pub fn train(
    model: &mut Model,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::config("data.train_count", "no training samples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be at least 1"));
    }
    let total = total_steps(cfg, samples.len());
    let deterministic = deterministic_mode();
    let mut adam = Adam::new(model.store(), cfg.lr);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let t0 = Instant::now();
            let k = 1.0 / batch.len() as f64;
            let mut sum: Option<Vec<Tensor>> = None;
            let mut loss = LossBreakdown::default();
            for &i in batch {
                let (b, g) = sample_gradients(model, &samples[i], cfg)?;
                if !b.is_finite() {
                    return Err(Error::shape(format!("non-finite loss on sample {}", samples[i].id)));
                }
                loss.accumulate(&b, k);
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (a, t) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.data.iter_mut().zip(&t.data) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            for (g, p) in grads.iter_mut().zip(model.store().tensors()) {
                for (x, w) in g.data.iter_mut().zip(&p.data) {
                    *x = *x * k + cfg.weight_decay * w;
                }
            }
            let lr = cosine_lr(cfg, step, total);
            adam.update(model.store_mut(), &grads, lr);
            let log = StepLog {
                step,
                epoch,
                lr,
                loss,
                wall_ms: (!deterministic).then(|| t0.elapsed().as_secs_f64() * 1e3),
            };
            if step % cfg.log_every.max(1) == 0 || step + 1 == total {
                on_step(&log);
            }
            report.logs.push(log);
            step += 1;
        }
        epoch += 1;
    }
    report.steps = step;
    Ok(report)
}
