//! Adversarial domain adaptation with a gradient reversal layer between the
//! pooled embedding and a domain discriminator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::net::{Discriminator, DiscriminatorConfig, ModelCheckpoint, RfResNet, Stage, Tensor};
use crate::train::{fit, mse_loss, require_labelled, Adam, DomainStats, EpochSummary, TrainConfig, TrainOutcome};

/// Gradient reversal: the identity going forward.
pub fn grl_forward(x: &Tensor) -> Tensor {
    x.clone()
}

/// Gradient reversal going backward: `g -> -lambda * g`.
pub fn grl_backward(g: &Tensor, lambda: f64) -> Tensor {
    let mut out = g.clone();
    for v in &mut out.data {
        *v = if lambda == 0.0 { 0.0 } else { -lambda * *v };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant,
    /// `lambda * (2 / (1 + exp(-10 p)) - 1)` with `p = step / steps`,
    /// capped at 1.
    SigmoidRamp { steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrlConfig {
    pub lambda: f64,
    pub schedule: LambdaSchedule,
    /// Weight of the domain loss relative to the regression loss.
    pub domain_weight: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            schedule: LambdaSchedule::Constant,
            domain_weight: 1.0,
        }
    }
}

impl GrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let LambdaSchedule::SigmoidRamp { steps: 0 } = self.schedule {
            return Err(Error::Config("ramp length must be at least 1".into()));
        }
        if !(self.domain_weight >= 0.0 && self.domain_weight.is_finite()) {
            return Err(Error::Config("domain_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Reversal coefficient at a 0-based optimizer step.
    pub fn lambda_at(&self, step: usize) -> f64 {
        match self.schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::SigmoidRamp { steps } => {
                let p = (step as f64 / steps as f64).min(1.0);
                self.lambda * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
            }
        }
    }
}

/// Equal numbers of labelled source and unlabelled target examples. Rows
/// are ordered source first; domain 0 is source, 1 is target.
#[derive(Debug, Clone)]
pub struct MixedBatch<'a> {
    source: Vec<&'a Sample>,
    target: Vec<&'a Sample>,
}

impl<'a> MixedBatch<'a> {
    pub fn new(source: Vec<&'a Sample>, target: Vec<&'a Sample>) -> Result<Self> {
        if source.is_empty() || source.len() != target.len() {
            return Err(Error::Precondition(format!(
                "mixed batch needs equal non-empty halves, got {} source and {} target",
                source.len(),
                target.len()
            )));
        }
        if let Some(s) = source.iter().find(|s| s.label.is_none()) {
            return Err(Error::Precondition(format!("source sample `{}` has no label", s.id)));
        }
        if let Some(s) = target.iter().find(|s| s.label.is_some()) {
            return Err(Error::Precondition(format!("target sample `{}` carries a label", s.id)));
        }
        Ok(Self { source, target })
    }

    pub fn len(&self) -> usize {
        2 * self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn half(&self) -> usize {
        self.source.len()
    }

    pub fn domains(&self) -> Vec<u8> {
        let mut d = vec![0; self.half()];
        d.resize(self.len(), 1);
        d
    }

    fn inputs(&self) -> Vec<&'a crate::dsp::Spectrogram> {
        self.source.iter().chain(&self.target).map(|s| s.input.as_ref()).collect()
    }
}

/// How the domain gradient reaches the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainGradient {
    /// Through the reversal layer.
    Reversed,
    /// Not at all; only the discriminator learns from the domain loss.
    Detached,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaStepResult {
    pub regression_loss: f64,
    pub domain_loss: f64,
    pub discriminator_accuracy: f64,
    pub lambda: f64,
}

/// Mean binary cross-entropy on logits against domain labels, its gradient
/// and the fraction of rows classified correctly.
pub fn domain_bce(logits: &Tensor, domains: &[u8]) -> (f64, Tensor, f64) {
    let n = domains.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &d) in domains.iter().enumerate() {
        let z = logits.data[i];
        let y = d as f64;
        // max(z,0) - z*y + ln(1 + e^-|z|)
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z).exp());
        grad.data[i] = (p - y) / n;
        if (z > 0.0) == (d == 1) {
            correct += 1;
        }
    }
    (loss / n, grad, correct as f64 / n)
}

/// Optimizer state for the model and discriminator.
pub struct DaOptimizers {
    pub model: Adam,
    pub discriminator: Adam,
}

impl DaOptimizers {
    pub fn new(model: &RfResNet, disc: &Discriminator) -> Self {
        Self {
            model: Adam::new(&model.params),
            discriminator: Adam::new(&disc.params),
        }
    }
}

/// Losses of a mixed batch under a training-mode forward pass, without
/// updating anything.
pub fn da_losses(model: &RfResNet, disc: &Discriminator, batch: &MixedBatch) -> Result<(f64, f64)> {
    let x = model.input_tensor(&batch.inputs())?;
    let fwd = model.forward_train(&x)?;
    let labels: Vec<_> = batch.source.iter().map(|s| s.label.expect("validated").0).collect();
    let (reg, _) = mse_loss(&fwd.output.slice_batch(0, batch.half()), &labels);
    let (dom, _, _) = domain_bce(&disc.forward(&fwd.embedding).logits, &batch.domains());
    Ok((reg, dom))
}

/// One adversarial step. The trunk runs on the whole batch; the regression
/// loss uses the source half and the domain loss every row.
#[allow(clippy::too_many_arguments)]
pub fn da_train_step(
    model: &mut RfResNet,
    disc: &mut Discriminator,
    opts: &mut DaOptimizers,
    batch: &MixedBatch,
    grl: &GrlConfig,
    step: usize,
    lr: f64,
    mode: DomainGradient,
) -> Result<DaStepResult> {
    let half = batch.half();
    let x = model.input_tensor(&batch.inputs())?;
    let fwd = model.forward_train(&x)?;

    let labels: Vec<_> = batch.source.iter().map(|s| s.label.expect("validated").0).collect();
    let (regression_loss, d_src) = mse_loss(&fwd.output.slice_batch(0, half), &labels);
    let mut d_out = Tensor::zeros(fwd.output.n, fwd.output.c, 1, 1);
    d_out.data[..d_src.data.len()].copy_from_slice(&d_src.data);

    let cache = disc.forward(&grl_forward(&fwd.embedding));
    let (bce, mut d_logits, accuracy) = domain_bce(&cache.logits, &batch.domains());
    let domain_loss = grl.domain_weight * bce;
    d_logits.data.iter_mut().for_each(|g| *g *= grl.domain_weight);

    let total = regression_loss + domain_loss;
    if !total.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: step,
            loss: total,
        });
    }

    let (disc_grads, d_emb_disc) = disc.backward(&cache, &d_logits);
    let mut grads = crate::net::Grads::zeros_like(&model.params);
    let mut d_emb = model.head_backward(&fwd, &d_out, &mut grads);
    let lambda = grl.lambda_at(step);
    if mode == DomainGradient::Reversed {
        d_emb.add_assign(&grl_backward(&d_emb_disc, lambda));
    }
    model.trunk_backward(&fwd, &d_emb, &mut grads);
    model.apply_bn_updates(&fwd);
    opts.model.step(&mut model.params, &grads, lr);
    opts.discriminator.step(&mut disc.params, &disc_grads, lr);
    Ok(DaStepResult {
        regression_loss,
        domain_loss,
        discriminator_accuracy: accuracy,
        lambda,
    })
}

/// Adversarial training from `init`. `target_pool` is drawn once per run by
/// the caller; each epoch pairs every source batch with an equally sized
/// target batch, cycling the shuffled pool if it is smaller.
pub fn train_da(
    init: &ModelCheckpoint,
    source: &[Sample],
    target_pool: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    grl: &GrlConfig,
    disc_config: &DiscriminatorConfig,
) -> Result<(TrainOutcome, Discriminator)> {
    config.validate()?;
    grl.validate()?;
    require_labelled(source, "source")?;
    require_labelled(val, "validation")?;
    if target_pool.is_empty() {
        return Err(Error::Precondition("target pool is empty".into()));
    }
    if disc_config.input != init.model.config().embedding_width() {
        return Err(Error::Config(format!(
            "discriminator input {} does not match embedding width {}",
            disc_config.input,
            init.model.config().embedding_width()
        )));
    }
    let mut disc = Discriminator::new(disc_config, config.seed)?;
    let mut opts = DaOptimizers::new(&init.model, &disc);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut src_order: Vec<usize> = (0..source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..target_pool.len()).collect();
    let mut step = 0usize;
    let target_free: Vec<Sample> = target_pool
        .iter()
        .map(|s| Sample {
            label: None,
            ..s.clone()
        })
        .collect();

    let disc_ref = &mut disc;
    let outcome = fit(init.model.clone(), val, config, Stage::Da, |model, epoch, lr| {
        src_order.shuffle(&mut rng);
        tgt_order.shuffle(&mut rng);
        let mut tgt_cursor = 0;
        let (mut reg, mut dom, mut acc, mut lam) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0;
        for (b, idx) in src_order.chunks(config.batch_size).enumerate() {
            let src: Vec<&Sample> = idx.iter().map(|&i| &source[i]).collect();
            let tgt: Vec<&Sample> = (0..idx.len())
                .map(|k| &target_free[tgt_order[(tgt_cursor + k) % tgt_order.len()]])
                .collect();
            tgt_cursor = (tgt_cursor + idx.len()) % tgt_order.len();
            let batch = MixedBatch::new(src, tgt)?;
            let r = da_train_step(model, disc_ref, &mut opts, &batch, grl, step, lr, DomainGradient::Reversed)
                .map_err(|e| match e {
                    Error::Divergence { loss, .. } => Error::Divergence { epoch, batch: b, loss },
                    other => other,
                })?;
            step += 1;
            reg += r.regression_loss;
            dom += r.domain_loss;
            acc += r.discriminator_accuracy;
            lam = r.lambda;
            batches += 1;
        }
        let n = batches as f64;
        Ok(EpochSummary {
            train_loss: reg / n,
            domain: Some(DomainStats {
                domain_loss: dom / n,
                discriminator_accuracy: acc / n,
                lambda: lam,
            }),
        })
    })?;
    Ok((outcome, disc))
}

/// Fraction of held-out embeddings a discriminator assigns to the right
/// domain.
pub fn discriminator_accuracy(model: &RfResNet, disc: &Discriminator, source: &[Sample], target: &[Sample]) -> Result<f64> {
    let (emb, domains) = labelled_embeddings(model, source, target)?;
    let logits = disc.forward(&emb).logits;
    Ok(domain_bce(&logits, &domains).2)
}

fn labelled_embeddings(model: &RfResNet, source: &[Sample], target: &[Sample]) -> Result<(Tensor, Vec<u8>)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Precondition("both domains need samples".into()));
    }
    let inputs: Vec<_> = source.iter().chain(target).map(|s| s.input.as_ref()).collect();
    let rows = model.embed(&inputs)?;
    let width = rows[0].len();
    let emb = Tensor::matrix(rows.len(), width, rows.into_iter().flatten().collect());
    let mut domains = vec![0u8; source.len()];
    domains.resize(source.len() + target.len(), 1);
    Ok((emb, domains))
}

/// Train a fresh discriminator on the frozen embeddings of `model` for
/// `steps` full-batch Adam steps.
pub fn train_probe_discriminator(
    model: &RfResNet,
    config: &DiscriminatorConfig,
    source: &[Sample],
    target: &[Sample],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Discriminator> {
    let (emb, domains) = labelled_embeddings(model, source, target)?;
    let mut disc = Discriminator::new(config, seed)?;
    let mut opt = Adam::new(&disc.params);
    for _ in 0..steps {
        let cache = disc.forward(&emb);
        let (_, d_logits, _) = domain_bce(&cache.logits, &domains);
        let (grads, _) = disc.backward(&cache, &d_logits);
        opt.step(&mut disc.params, &grads, lr);
    }
    Ok(disc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grl_identity_and_scaling() {
        let x = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]);
        assert_eq!(grl_forward(&x), x);
        assert!(grl_backward(&x, 0.0).data.iter().all(|v| v.to_bits() == 0));
        assert_eq!(grl_backward(&x, 2.0).data, vec![-2.0, 4.0, -1.0]);
    }

    #[test]
    fn lambda_schedules() {
        let c = GrlConfig::default();
        assert_eq!(c.lambda_at(1000), 1.0);
        let r = GrlConfig {
            schedule: LambdaSchedule::SigmoidRamp { steps: 100 },
            ..Default::default()
        };
        assert_eq!(r.lambda_at(0), 0.0);
        assert!(r.lambda_at(50) < r.lambda_at(100));
        assert!((r.lambda_at(500) - r.lambda_at(100)).abs() < 1e-15);
        assert!(GrlConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GrlConfig {
            schedule: LambdaSchedule::SigmoidRamp { steps: 0 },
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = Tensor::matrix(3, 1, vec![0.3, -1.2, 2.0]);
        let (loss, grad, acc) = domain_bce(&logits, &[0, 1, 1]);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let direct = -((1.0 - sig(0.3)).ln() + sig(-1.2).ln() + sig(2.0).ln()) / 3.0;
        assert!((loss - direct).abs() < 1e-12);
        assert!((grad.data[1] - (sig(-1.2) - 1.0) / 3.0).abs() < 1e-15);
        assert!((acc - 1.0 / 3.0).abs() < 1e-15);
    }
}
