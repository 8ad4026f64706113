//! The three-step pipeline on the synthetic two-domain task: baseline,
//! adversarial teacher candidates, and a distilled student.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::da::{train_da, GrlConfig};
use crate::data::{
    gen_synthetic_domain_pair, split_by_artist, synthetic_records, Bucket, Sample, SplitFractions, SyntheticConfig,
    SyntheticPair,
};
use crate::distill::{pseudo_label, select_teachers, train_student, DistillConfig, PseudoLabelledSet, TeacherPool};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, model_discrepancy};
use crate::net::{build_model, DiscriminatorConfig, ModelCheckpoint, RfResNetConfig};
use crate::train::{train_supervised, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: SyntheticConfig,
    /// Channel width of the tiny network built for the synthetic input.
    pub width: usize,
    pub split: SplitFractions,
    pub train: TrainConfig,
    pub grl: GrlConfig,
    /// Hidden widths of the discriminator; empty uses a quarter of the
    /// embedding width.
    pub discriminator_hidden: Vec<usize>,
    pub distill: DistillConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            width: 8,
            split: SplitFractions {
                train: 0.8,
                validation: 0.1,
                test: 0.1,
            },
            train: TrainConfig {
                max_epochs: 30,
                milestones: vec![15, 22],
                patience: 10,
                ..TrainConfig::default()
            },
            grl: GrlConfig::default(),
            discriminator_hidden: Vec::new(),
            distill: DistillConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self) -> RfResNetConfig {
        RfResNetConfig::tiny([self.data.bands, self.data.frames], self.width)
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        let model = self.model_config();
        let mut c = DiscriminatorConfig::for_model(&model);
        if !self.discriminator_hidden.is_empty() {
            c.hidden.clone_from(&self.discriminator_hidden);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.grl.validate()?;
        self.distill.validate()?;
        Ok(())
    }
}

/// Seed for the `index`-th run of a stage, derived from the pipeline seed.
pub fn derive_seed(seed: u64, stage: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stage * 1_000).wrapping_add(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub id: String,
    pub target_mse: f64,
    pub source_val_r: f64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub baseline: StageMetrics,
    pub candidates: Vec<StageMetrics>,
    pub teachers: Vec<String>,
    /// Means over the selected teachers.
    pub da_target_mse: f64,
    pub da_source_val_r: f64,
    pub da_discrepancy: f64,
    /// Target MSE of the averaged teacher predictions.
    pub ensemble_target_mse: f64,
    pub pseudo_labels: usize,
    pub pseudo_subset_hash: String,
    pub student: StageMetrics,
}

pub struct PipelineArtifacts {
    pub report: PipelineReport,
    pub baseline: TrainOutcome,
    pub candidates: Vec<TrainOutcome>,
    pub pool: TeacherPool,
    pub pseudo: PseudoLabelledSet,
    pub student: TrainOutcome,
}

/// Source splits and target sets of one synthetic pair.
pub struct SyntheticSplits {
    pub pair: SyntheticPair,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub target_pool: Vec<Sample>,
    pub target_test: Vec<Sample>,
}

pub fn synthetic_splits(config: &PipelineConfig, seed: u64) -> Result<SyntheticSplits> {
    let pair = gen_synthetic_domain_pair(&config.data, seed)?;
    let split = split_by_artist(&synthetic_records(&pair), config.split, seed)?;
    let source = pair.source_samples();
    let pick = |b: Bucket| -> Vec<Sample> {
        source.iter().filter(|s| split.bucket(b).contains(&s.id)).cloned().collect()
    };
    let (train, val, test) = (pick(Bucket::Train), pick(Bucket::Validation), pick(Bucket::Test));
    if val.len() < 3 {
        return Err(Error::Config(format!("validation split has only {} clips", val.len())));
    }
    Ok(SyntheticSplits {
        target_pool: pair.target_pool_samples(),
        target_test: pair.target_test_samples(),
        pair,
        train,
        val,
        test,
    })
}

/// `n` clips drawn without replacement from `pool`.
pub fn draw(pool: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n > pool.len() {
        return Err(Error::NotEnough {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

fn stage_metrics(ckpt: &ModelCheckpoint, splits: &SyntheticSplits, source_held_out: &[Sample]) -> Result<StageMetrics> {
    Ok(StageMetrics {
        id: ckpt.id.clone(),
        target_mse: evaluate(&ckpt.model, &splits.target_test)?.avg_mse,
        source_val_r: ckpt.provenance.validation_score.unwrap_or(0.0),
        discrepancy: model_discrepancy(&ckpt.model, source_held_out, &splits.target_test)?.value,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Run baseline, teacher candidates, selection, pseudo-labelling and the
/// student for one seed. Target-domain metrics use the held-out target
/// test clips; the discrepancy compares them with held-out source clips.
pub fn run_synthetic_pipeline(config: &PipelineConfig, seed: u64) -> Result<PipelineArtifacts> {
    config.validate()?;
    let splits = synthetic_splits(config, seed)?;
    let model_cfg = config.model_config();
    let disc_cfg = config.discriminator_config();
    let held_out: Vec<Sample> = splits.val.iter().chain(&splits.test).cloned().collect();

    let base_cfg = TrainConfig {
        seed: derive_seed(seed, 1, 0),
        ..config.train.clone()
    };
    log::info!("seed {seed}: baseline");
    let baseline = train_supervised(&build_model(&model_cfg, base_cfg.seed)?, &splits.train, &splits.val, &base_cfg)?;

    let pool_n = splits.train.len().min(splits.target_pool.len());
    let mut candidates = Vec::with_capacity(config.distill.candidates);
    for i in 0..config.distill.candidates {
        let cfg = TrainConfig {
            seed: derive_seed(seed, 2, i as u64),
            ..config.train.clone()
        };
        log::info!("seed {seed}: adversarial candidate {}/{}", i + 1, config.distill.candidates);
        let pool = draw(&splits.target_pool, pool_n, cfg.seed)?;
        let (outcome, _) = train_da(
            &build_model(&model_cfg, cfg.seed)?,
            &splits.train,
            &pool,
            &splits.val,
            &cfg,
            &config.grl,
            &disc_cfg,
        )?;
        candidates.push(outcome);
    }

    let pool = select_teachers(
        candidates.iter().map(|c| c.checkpoint.clone()).collect(),
        &splits.val,
        config.distill.k,
    )?;
    let teachers = pool.teachers();
    let n_pseudo = config.distill.pseudo_count(splits.train.len());
    let subset = draw(&splits.target_pool, n_pseudo, derive_seed(seed, 3, 0))?;
    let pseudo = pseudo_label(&teachers, &subset, config.distill.clip_labels)?;

    let student_cfg = TrainConfig {
        seed: derive_seed(seed, 4, 0),
        ..config.train.clone()
    };
    log::info!("seed {seed}: student on {} pseudo-labelled clips", pseudo.samples.len());
    let student = train_student(&model_cfg, &splits.train, &pseudo, &splits.val, &student_cfg)?;

    let candidate_metrics = candidates
        .iter()
        .map(|c| stage_metrics(&c.checkpoint, &splits, &held_out))
        .collect::<Result<Vec<_>>>()?;
    let selected: Vec<&StageMetrics> = pool.selected.iter().map(|&i| &candidate_metrics[i]).collect();
    let ensemble = pseudo_label(&teachers, &splits.target_test, false)?;
    let ensemble_target_mse = crate::metrics::regression_report(
        &ensemble.samples.iter().map(|s| s.label.expect("pseudo-labelled")).collect::<Vec<_>>(),
        &splits
            .target_test
            .iter()
            .filter(|s| !ensemble.excluded.contains(&s.id))
            .map(|s| s.label.expect("target test is labelled"))
            .collect::<Vec<_>>(),
    )?
    .avg_mse;

    let report = PipelineReport {
        seed,
        baseline: stage_metrics(&baseline.checkpoint, &splits, &held_out)?,
        teachers: teachers.iter().map(|t| t.id.clone()).collect(),
        da_target_mse: mean(selected.iter().map(|m| m.target_mse)),
        da_source_val_r: mean(selected.iter().map(|m| m.source_val_r)),
        da_discrepancy: mean(selected.iter().map(|m| m.discrepancy)),
        candidates: candidate_metrics.clone(),
        ensemble_target_mse,
        pseudo_labels: pseudo.samples.len(),
        pseudo_subset_hash: pseudo.subset_hash.clone(),
        student: stage_metrics(&student.checkpoint, &splits, &held_out)?,
    };
    Ok(PipelineArtifacts {
        report,
        baseline,
        candidates,
        pool,
        pseudo,
        student,
    })
}
