//! Teacher selection, ensemble pseudo-labelling and student training.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ClipRecord, Domain, MidLevelVector, Sample, LABEL_MAX, LABEL_MIN, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::net::{ModelCheckpoint, RfResNet, RfResNetConfig, Stage};
use crate::train::{train_stage, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Adversarial runs trained as teacher candidates.
    pub candidates: usize,
    /// Teachers kept.
    pub k: usize,
    /// Pseudo-labelled subset size; `None` uses `fraction` of the source
    /// training set.
    pub pseudo_size: Option<usize>,
    pub fraction: f64,
    /// Clip pseudo-labels to the rating scale.
    pub clip_labels: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            candidates: 8,
            k: 4,
            pseudo_size: None,
            fraction: 0.10,
            clip_labels: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.candidates < self.k {
            return Err(Error::Config(format!(
                "need 1 <= k <= candidates, got k={} candidates={}",
                self.k, self.candidates
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must lie in (0,1], got {}", self.fraction)));
        }
        Ok(())
    }

    pub fn pseudo_count(&self, source_train: usize) -> usize {
        self.pseudo_size
            .unwrap_or_else(|| ((source_train as f64 * self.fraction).round() as usize).max(1))
    }
}

/// Indices of the `k` best scores, highest first; equal scores are ordered
/// by id.
pub fn top_k(scored: &[(String, f64)], k: usize) -> Result<Vec<usize>> {
    if k == 0 || scored.len() < k {
        return Err(Error::NotEnough {
            requested: k,
            available: scored.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| {
        scored[b]
            .1
            .total_cmp(&scored[a].1)
            .then_with(|| scored[a].0.cmp(&scored[b].0))
    });
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone)]
pub struct TeacherPool {
    pub candidates: Vec<ModelCheckpoint>,
    pub scores: Vec<f64>,
    /// Indices into `candidates`, best first.
    pub selected: Vec<usize>,
}

impl TeacherPool {
    pub fn teachers(&self) -> Vec<&ModelCheckpoint> {
        self.selected.iter().map(|&i| &self.candidates[i]).collect()
    }
}

/// Score every candidate by average validation correlation and keep the
/// top `k`.
pub fn select_teachers(candidates: Vec<ModelCheckpoint>, val: &[Sample], k: usize) -> Result<TeacherPool> {
    if candidates.len() < k || k == 0 {
        return Err(Error::NotEnough {
            requested: k,
            available: candidates.len(),
        });
    }
    let scores = candidates
        .iter()
        .map(|c| evaluate(&c.model, val).map(|r| r.avg_pearson))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<_> = candidates.iter().map(|c| c.id.clone()).zip(scores.iter().copied()).collect();
    let selected = top_k(&scored, k)?;
    Ok(TeacherPool {
        candidates,
        scores,
        selected,
    })
}

/// Per-clip ensemble means. `teacher_predictions` pairs a teacher id with
/// its predictions over the same clips. Teachers are summed in id order so
/// the result does not depend on the order they are given in; clips where
/// any teacher output is non-finite come back as `None`.
pub fn ensemble_mean(teacher_predictions: &[(&str, &[MidLevelVector])]) -> Result<Vec<Option<MidLevelVector>>> {
    let Some(first) = teacher_predictions.first() else {
        return Err(Error::Precondition("no teachers".into()));
    };
    let clips = first.1.len();
    if teacher_predictions.iter().any(|(_, p)| p.len() != clips) {
        return Err(Error::Shape("teachers predicted different numbers of clips".into()));
    }
    let mut order: Vec<usize> = (0..teacher_predictions.len()).collect();
    order.sort_by(|&a, &b| teacher_predictions[a].0.cmp(teacher_predictions[b].0));
    let k = teacher_predictions.len() as f64;
    Ok((0..clips)
        .map(|c| {
            let mut acc = [0.0; NUM_FEATURES];
            for &t in &order {
                let p = teacher_predictions[t].1[c];
                if p.0.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                for (a, v) in acc.iter_mut().zip(p.0) {
                    *a += v;
                }
            }
            Some(MidLevelVector(acc.map(|a| a / k)))
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct PseudoLabelledSet {
    pub samples: Vec<Sample>,
    /// Teacher checkpoint ids, sorted.
    pub teacher_ids: Vec<String>,
    /// SHA-256 over the sorted ids of the subset that was labelled.
    pub subset_hash: String,
    /// Clips dropped because a teacher produced a non-finite output.
    pub excluded: Vec<String>,
}

pub fn subset_hash(ids: &[&str]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl PseudoLabelledSet {
    /// Manifest rows with a `teachers` provenance column. Paths and artists
    /// come from `metadata`.
    pub fn to_manifest(&self, metadata: &HashMap<&str, &ClipRecord>) -> Result<(Vec<ClipRecord>, Vec<String>)> {
        let teachers = self.teacher_ids.join(";");
        let records = self
            .samples
            .iter()
            .map(|s| {
                let meta = metadata.get(s.id.as_str()).ok_or_else(|| Error::UnknownClip(s.id.clone()))?;
                Ok(ClipRecord {
                    clip_id: s.id.clone(),
                    audio_path: meta.audio_path.clone(),
                    artist: meta.artist.clone(),
                    domain: Domain::Target,
                    labels: s.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let provenance = vec![teachers; records.len()];
        Ok((records, provenance))
    }
}

/// Label `subset` with the mean prediction of `teachers`.
pub fn pseudo_label(teachers: &[&ModelCheckpoint], subset: &[Sample], clip_labels: bool) -> Result<PseudoLabelledSet> {
    if teachers.is_empty() {
        return Err(Error::Precondition("teacher pool is empty".into()));
    }
    let inputs: Vec<_> = subset.iter().map(|s| s.input.as_ref()).collect();
    let preds = if inputs.is_empty() {
        vec![Vec::new(); teachers.len()]
    } else {
        teachers.iter().map(|t| t.model.predict(&inputs)).collect::<Result<Vec<_>>>()?
    };
    let paired: Vec<(&str, &[MidLevelVector])> =
        teachers.iter().zip(&preds).map(|(t, p)| (t.id.as_str(), p.as_slice())).collect();
    let means = ensemble_mean(&paired)?;
    let mut samples = Vec::with_capacity(subset.len());
    let mut excluded = Vec::new();
    for (s, m) in subset.iter().zip(means) {
        match m {
            Some(mut v) => {
                if clip_labels {
                    v = MidLevelVector(v.0.map(|x| x.clamp(LABEL_MIN, LABEL_MAX)));
                }
                samples.push(Sample {
                    id: s.id.clone(),
                    input: s.input.clone(),
                    label: Some(v),
                });
            }
            None => excluded.push(s.id.clone()),
        }
    }
    if !excluded.is_empty() {
        log::warn!("{} clips excluded for non-finite teacher output", excluded.len());
    }
    let mut teacher_ids: Vec<String> = teachers.iter().map(|t| t.id.clone()).collect();
    teacher_ids.sort();
    let ids: Vec<&str> = subset.iter().map(|s| s.id.as_str()).collect();
    Ok(PseudoLabelledSet {
        samples,
        teacher_ids,
        subset_hash: subset_hash(&ids),
        excluded,
    })
}

/// Train a freshly initialized model on source plus pseudo-labelled clips.
pub fn train_student(
    model_config: &RfResNetConfig,
    source: &[Sample],
    pseudo: &PseudoLabelledSet,
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = RfResNet::new(model_config, config.seed)?;
    let mut combined = source.to_vec();
    combined.extend(pseudo.samples.iter().cloned());
    train_stage(model, &combined, val, config, Stage::Student)
}
