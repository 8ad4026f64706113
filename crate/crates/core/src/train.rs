//! Supervised training: Adam, a multi-step learning-rate schedule, early
//! stopping on validation correlation and the per-epoch log.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::net::params::to_f32_grid;
use crate::net::{Grads, ModelCheckpoint, ParamKind, ParamStore, Provenance, RfResNet, Stage, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            milestones: vec![30, 60],
            decay: 0.1,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones must be strictly increasing: {:?}", self.milestones)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay must lie in (0,1), got {}", self.decay)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.learning_rate,
            milestones: self.milestones.clone(),
            decay: self.decay,
        }
    }
}

/// Learning rate multiplied by `decay` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl MultiStepLr {
    /// Rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.decay.powi(passed as i32)
    }
}

/// Adam over the weight arrays of a [`ParamStore`]; buffers are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            if e.kind != ParamKind::Weight {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.data[i]);
            for j in 0..e.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                e.data[j] = to_f32_grid(e.data[j] - update);
            }
        }
    }
}

/// Patience-based stopping on a score where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since: 0,
        }
    }

    /// Record a score; returns true when it improves on the best so far.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Extra columns logged by adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain_loss: f64,
    pub discriminator_accuracy: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_avg_r: f64,
    pub val_mse: f64,
    pub domain: Option<DomainStats>,
}

/// Comma-separated epoch log; domain columns appear when any record has them.
pub fn format_epoch_log(log: &[EpochRecord]) -> String {
    let with_domain = log.iter().any(|r| r.domain.is_some());
    let mut out = String::from("epoch,lr,train_loss,val_avg_r,val_mse");
    if with_domain {
        out.push_str(",domain_loss,discriminator_accuracy,lambda");
    }
    out.push('\n');
    for r in log {
        let _ = write!(out, "{},{:e},{:.8},{:.8},{:.8}", r.epoch, r.lr, r.train_loss, r.val_avg_r, r.val_mse);
        if with_domain {
            match r.domain {
                Some(d) => {
                    let _ = write!(out, ",{:.8},{:.6},{:.6}", d.domain_loss, d.discriminator_accuracy, d.lambda);
                }
                None => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochRecord>,
    /// Validation report of the returned checkpoint.
    pub validation: EvalReport,
}

/// What one epoch of a training loop reports back.
pub struct EpochSummary {
    pub train_loss: f64,
    pub domain: Option<DomainStats>,
}

/// Shared epoch loop: schedule, validation, early stopping and best-model
/// tracking. `run_epoch` performs the parameter updates for one epoch.
pub fn fit<F>(
    mut model: RfResNet,
    val: &[Sample],
    config: &TrainConfig,
    stage: Stage,
    mut run_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&mut RfResNet, usize, f64) -> Result<EpochSummary>,
{
    config.validate()?;
    let schedule = config.schedule();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<(RfResNet, usize, EvalReport)> = None;
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr_at(epoch);
        let summary = run_epoch(&mut model, epoch, lr)?;
        let report = evaluate(&model, val)?;
        log::debug!(
            "{stage:?} epoch {epoch}: loss {:.5} val r {:.4} mse {:.4}",
            summary.train_loss,
            report.avg_pearson,
            report.avg_mse
        );
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss: summary.train_loss,
            val_avg_r: report.avg_pearson,
            val_mse: report.avg_mse,
            domain: summary.domain,
        });
        if stopper.observe(report.avg_pearson) {
            best = Some((model.clone(), epoch, report));
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (model, epoch, validation) = best.expect("at least one epoch runs");
    let stage_name = match stage {
        Stage::Init => "init",
        Stage::Baseline => "baseline",
        Stage::Da => "da",
        Stage::Student => "student",
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            id: format!("{stage_name}-{}", config.seed),
            model,
            provenance: Provenance {
                stage,
                seed: config.seed,
                epoch,
                validation_score: Some(validation.avg_pearson),
            },
        },
        log,
        validation,
    })
}

/// Mean squared error over `n x 7` predictions and its gradient.
pub fn mse_loss(pred: &Tensor, labels: &[[f64; NUM_FEATURES]]) -> (f64, Tensor) {
    debug_assert_eq!(pred.n, labels.len());
    let count = (pred.n * NUM_FEATURES) as f64;
    let mut grad = Tensor::zeros(pred.n, pred.c, 1, 1);
    let mut loss = 0.0;
    for (i, y) in labels.iter().enumerate() {
        for j in 0..NUM_FEATURES {
            let d = pred.data[i * NUM_FEATURES + j] - y[j];
            loss += d * d;
            grad.data[i * NUM_FEATURES + j] = 2.0 * d / count;
        }
    }
    (loss / count, grad)
}

pub(crate) fn require_labelled(set: &[Sample], what: &str) -> Result<Vec<[f64; NUM_FEATURES]>> {
    if set.is_empty() {
        return Err(Error::Precondition(format!("{what} set is empty")));
    }
    set.iter()
        .map(|s| {
            s.label
                .map(|l| l.0)
                .ok_or_else(|| Error::Precondition(format!("{what} sample `{}` has no label", s.id)))
        })
        .collect()
}

/// One supervised step on `batch`; returns the loss.
pub fn supervised_step(
    model: &mut RfResNet,
    opt: &mut Adam,
    batch: &[&Sample],
    lr: f64,
    epoch: usize,
    batch_id: usize,
) -> Result<f64> {
    let labels: Vec<_> = batch
        .iter()
        .map(|s| s.label.map(|l| l.0).ok_or_else(|| Error::Precondition(format!("sample `{}` has no label", s.id))))
        .collect::<Result<_>>()?;
    let inputs: Vec<_> = batch.iter().map(|s| s.input.as_ref()).collect();
    let x = model.input_tensor(&inputs)?;
    let fwd = model.forward_train(&x)?;
    let (loss, d_out) = mse_loss(&fwd.output, &labels);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch,
            batch: batch_id,
            loss,
        });
    }
    let grads = model.backward(&fwd, &d_out);
    model.apply_bn_updates(&fwd);
    opt.step(&mut model.params, &grads, lr);
    Ok(loss)
}

/// Train from `init` on a labelled set with early stopping on `val`.
pub fn train_supervised(
    init: &ModelCheckpoint,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_stage(init.model.clone(), train, val, config, Stage::Baseline)
}

pub(crate) fn train_stage(
    model: RfResNet,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    stage: Stage,
) -> Result<TrainOutcome> {
    config.validate()?;
    require_labelled(train, "training")?;
    require_labelled(val, "validation")?;
    let mut opt = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    fit(model, val, config, stage, |model, epoch, lr| {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            total += supervised_step(model, &mut opt, &batch, lr, epoch, b)?;
            batches += 1;
        }
        Ok(EpochSummary {
            train_loss: total / batches as f64,
            domain: None,
        })
    })
}
