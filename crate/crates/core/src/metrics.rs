//! Domain discrepancy, regression scores, linear probes and Pearson-based
//! feature selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{MidLevelVector, Sample, FEATURE_NAMES, NUM_FEATURES, SEGMENT_SECONDS};
use crate::dsp::SpectrogramExtractor;
use crate::error::{Error, Result};
use crate::net::RfResNet;

/// Sample Pearson correlation; `None` when either input has zero variance.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson inputs differ in length");
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson r with a two-sided p-value from the t distribution with n-2
/// degrees of freedom.
pub fn pearson_with_p(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("x has {} values, y has {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 pairs, got {}", x.len())));
    }
    let r = pearson_r(x, y).ok_or_else(|| Error::UndefinedCorrelation("constant input".into()))?;
    let df = (x.len() - 2) as f64;
    if r.abs() >= 1.0 {
        return Ok((r, 0.0));
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::UndefinedCorrelation(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok((r, p))
}

/// Per-feature regression scores over a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pearson: [f64; NUM_FEATURES],
    /// Features whose correlation was undefined (constant predictions or
    /// labels) and reported as 0.
    pub undefined: [bool; NUM_FEATURES],
    pub mse: [f64; NUM_FEATURES],
    pub avg_pearson: f64,
    pub avg_mse: f64,
}

/// Score predictions against labels; averages are unweighted over features.
pub fn regression_report(predictions: &[MidLevelVector], labels: &[MidLevelVector]) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    if predictions.is_empty() {
        return Err(Error::Precondition("cannot evaluate an empty set".into()));
    }
    let n = predictions.len() as f64;
    let mut pearson = [0.0; NUM_FEATURES];
    let mut undefined = [false; NUM_FEATURES];
    let mut mse = [0.0; NUM_FEATURES];
    for j in 0..NUM_FEATURES {
        let p: Vec<f64> = predictions.iter().map(|v| v.0[j]).collect();
        let l: Vec<f64> = labels.iter().map(|v| v.0[j]).collect();
        match pearson_r(&p, &l) {
            Some(r) => pearson[j] = r,
            None => undefined[j] = true,
        }
        mse[j] = p.iter().zip(&l).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    }
    Ok(EvalReport {
        avg_pearson: pearson.iter().sum::<f64>() / NUM_FEATURES as f64,
        avg_mse: mse.iter().sum::<f64>() / NUM_FEATURES as f64,
        pearson,
        undefined,
        mse,
    })
}

/// Evaluate a model on a labelled set.
pub fn evaluate(model: &RfResNet, set: &[Sample]) -> Result<EvalReport> {
    let labels = set
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Precondition(format!("sample `{}` has no label", s.id))))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<_> = set.iter().map(|s| s.input.as_ref()).collect();
    if inputs.is_empty() {
        return Err(Error::Precondition("cannot evaluate an empty set".into()));
    }
    let preds = model.predict(&inputs)?;
    regression_report(&preds, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyResult {
    pub value: f64,
    pub m: usize,
    pub n: usize,
    pub width: usize,
}

/// Euclidean distance between the mean embeddings of two samples.
pub fn discrepancy_from_embeddings(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<DiscrepancyResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Precondition("both samples must be non-empty".into()));
    }
    let width = source[0].len();
    if let Some(bad) = source.iter().chain(target).find(|v| v.len() != width) {
        return Err(Error::Shape(format!("embedding width {} differs from {width}", bad.len())));
    }
    let mean = |set: &[Vec<f64>]| {
        let mut acc = vec![0.0; width];
        for v in set {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= set.len() as f64);
        acc
    };
    let (ms, mt) = (mean(source), mean(target));
    let value = ms.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(DiscrepancyResult {
        value,
        m: source.len(),
        n: target.len(),
        width,
    })
}

/// Discrepancy under an arbitrary feature map.
pub fn domain_discrepancy<X, F>(embed: F, source: &[X], target: &[X]) -> Result<DiscrepancyResult>
where
    F: Fn(&X) -> Vec<f64>,
{
    let s: Vec<_> = source.iter().map(&embed).collect();
    let t: Vec<_> = target.iter().map(&embed).collect();
    discrepancy_from_embeddings(&s, &t)
}

/// Discrepancy between two sets of clips under a model's pooled embedding.
pub fn model_discrepancy(model: &RfResNet, source: &[Sample], target: &[Sample]) -> Result<DiscrepancyResult> {
    let s: Vec<_> = source.iter().map(|x| x.input.as_ref()).collect();
    let t: Vec<_> = target.iter().map(|x| x.input.as_ref()).collect();
    if s.is_empty() || t.is_empty() {
        return Err(Error::Precondition("both samples must be non-empty".into()));
    }
    discrepancy_from_embeddings(&model.embed(&s)?, &model.embed(&t)?)
}

/// Mean prediction over consecutive 15 s windows of a performance; a
/// trailing partial window is dropped.
pub fn average_features_over_time(
    model: &RfResNet,
    extractor: &SpectrogramExtractor,
    pcm: &[f32],
) -> Result<MidLevelVector> {
    let window = SEGMENT_SECONDS as usize * extractor.config().sample_rate as usize;
    let count = pcm.len() / window;
    if count == 0 {
        return Err(Error::TooShort {
            samples: pcm.len(),
            required: window,
        });
    }
    let specs = (0..count)
        .map(|i| extractor.compute(&pcm[i * window..(i + 1) * window]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = specs.iter().collect();
    let preds = model.predict(&refs)?;
    let mut mean = [0.0; NUM_FEATURES];
    for p in &preds {
        for (m, v) in mean.iter_mut().zip(p.0) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    Ok(MidLevelVector(mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// In-sample coefficient of determination.
    pub r2: f64,
    /// Set when the design matrix (with intercept) is rank deficient; the
    /// solution is then the minimum-norm least-squares one.
    pub rank_deficient: bool,
}

/// Ordinary least squares with an intercept, solved through the SVD
/// pseudo-inverse.
pub fn fit_linear_probe(x: &[Vec<f64>], y: &[f64]) -> Result<LinearProbe> {
    let rows = x.len();
    if rows != y.len() {
        return Err(Error::Shape(format!("{rows} feature rows but {} targets", y.len())));
    }
    let cols = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("feature rows differ in width".into()));
    }
    if rows < cols + 2 {
        return Err(Error::Precondition(format!(
            "need more rows than parameters: {rows} rows for {} parameters",
            cols + 1
        )));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite probe input".into()));
    }
    let design = DMatrix::from_fn(rows, cols + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let target = DVector::from_column_slice(y);
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (rows.max(cols + 1) as f64) * f64::EPSILON;
    let rank = svd.rank(tol);
    let beta = svd
        .solve(&target, tol)
        .map_err(|e| Error::Precondition(format!("least squares failed: {e}")))?;

    let fitted = &design * &beta;
    let mean = y.iter().sum::<f64>() / rows as f64;
    let ss_res: f64 = fitted.iter().zip(y).map(|(f, t)| (t - f).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|t| (t - mean).powi(2)).sum();
    // A constant target is perfectly explained by the intercept alone.
    let r2 = if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearProbe {
        intercept: beta[0],
        weights: beta.iter().skip(1).copied().collect(),
        r2,
        rank_deficient: rank < cols + 1,
    })
}

pub const R_THRESHOLD: f64 = 0.20;
pub const P_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub feature: usize,
    pub dimension: usize,
    pub r: f64,
    pub p: f64,
}

impl FeatureCorrelation {
    pub fn name(&self) -> &'static str {
        FEATURE_NAMES[self.feature]
    }
}

/// Linear-probe fit quality per expressive dimension and per-feature
/// correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model: String,
    pub r2: Vec<f64>,
    pub correlations: Vec<FeatureCorrelation>,
}

/// Fit one probe per dimension and correlate every feature with every
/// dimension. `features` is performances x 7, `dimensions` performances x d.
pub fn probe_report(model: &str, features: &[Vec<f64>], dimensions: &[Vec<f64>]) -> Result<ProbeReport> {
    if features.len() != dimensions.len() {
        return Err(Error::Shape("feature and dimension tables differ in length".into()));
    }
    let dims = dimensions.first().map_or(0, Vec::len);
    if dims == 0 || dimensions.iter().any(|d| d.len() != dims) {
        return Err(Error::Shape("dimension rows must be non-empty and equal width".into()));
    }
    let mut r2 = Vec::with_capacity(dims);
    let mut correlations = Vec::new();
    for d in 0..dims {
        let y: Vec<f64> = dimensions.iter().map(|row| row[d]).collect();
        r2.push(fit_linear_probe(features, &y)?.r2);
        for f in 0..features[0].len() {
            let x: Vec<f64> = features.iter().map(|row| row[f]).collect();
            let (r, p) = match pearson_with_p(&x, &y) {
                Ok(v) => v,
                Err(Error::UndefinedCorrelation(_)) => (0.0, 1.0),
                Err(e) => return Err(e),
            };
            correlations.push(FeatureCorrelation {
                feature: f,
                dimension: d,
                r,
                p,
            });
        }
    }
    Ok(ProbeReport {
        model: model.to_string(),
        r2,
        correlations,
    })
}

/// Features with `|r| > r_threshold` and `p < p_threshold` for one
/// dimension, strongest first.
pub fn select_explanatory_features(
    report: &ProbeReport,
    dimension: usize,
    r_threshold: f64,
    p_threshold: f64,
) -> Vec<FeatureCorrelation> {
    let mut out: Vec<_> = report
        .correlations
        .iter()
        .filter(|c| c.dimension == dimension && c.r.abs() > r_threshold && c.p < p_threshold)
        .cloned()
        .collect();
    out.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()).then(a.feature.cmp(&b.feature)));
    out
}

/// Table-1 style CSV: one row per model, one R² column per dimension.
pub fn format_r2_table(reports: &[ProbeReport]) -> String {
    let dims = reports.first().map_or(0, |r| r.r2.len());
    let mut out = String::from("model");
    for d in 0..dims {
        out.push_str(&format!(",dim{}", d + 1));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&r.model);
        for v in &r.r2 {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Table-2 style CSV for one dimension: feature, r, p, selected flag.
pub fn format_correlation_table(report: &ProbeReport, dimension: usize) -> String {
    let selected: Vec<usize> = select_explanatory_features(report, dimension, R_THRESHOLD, P_THRESHOLD)
        .iter()
        .map(|c| c.feature)
        .collect();
    let mut out = String::from("feature,r,p,selected\n");
    for c in report.correlations.iter().filter(|c| c.dimension == dimension) {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            FEATURE_NAMES.get(c.feature).copied().unwrap_or("?"),
            c.r,
            c.p,
            selected.contains(&c.feature)
        ));
    }
    out
}
