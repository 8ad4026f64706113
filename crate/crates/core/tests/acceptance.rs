#![allow(clippy::needless_range_loop, clippy::type_complexity)]
//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use midlevel_core::cli::{self, Cli};
use midlevel_core::da::{domain_bce, grl_backward, grl_forward};
use midlevel_core::data::{split_by_artist, ClipRecord, Domain, MidLevelVector, Sample, SplitFractions, SPLIT_TOLERANCE};
use midlevel_core::distill::{ensemble_mean, pseudo_label, top_k};
use midlevel_core::dsp::{compute_spectrogram, Spectrogram, SpectrogramConfig};
use midlevel_core::metrics::{
    domain_discrepancy, fit_linear_probe, pearson_with_p, select_explanatory_features, FeatureCorrelation,
    ProbeReport, P_THRESHOLD, R_THRESHOLD,
};
use midlevel_core::net::{
    build_model, receptive_field, Discriminator, DiscriminatorConfig, ParamKind, RfResNet, RfResNetConfig, Tensor,
};
use midlevel_core::pipeline::{run_synthetic_pipeline, PipelineConfig};
use midlevel_core::train::mse_loss;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// 1. Gradient reversal on a toy network: a 2-parameter affine trunk
// h = a x + b feeding a 1-2-1 discriminator (7 parameters).
fn grl_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
    let domains = [0u8, 1, 0, 1, 1, 0];
    let disc = Discriminator::new(&DiscriminatorConfig { input: 1, hidden: vec![2] }, 3).unwrap();
    let (a, b) = (0.7, -0.2);
    let loss = |a: f64, b: f64| {
        let h = Tensor::matrix(xs.len(), 1, xs.iter().map(|x| a * x + b).collect());
        domain_bce(&disc.forward(&h).logits, &domains).0
    };
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let h = Tensor::matrix(xs.len(), 1, xs.iter().map(|x| a * x + b).collect());
        let cache = disc.forward(&grl_forward(&h));
        let (_, d_logits, _) = domain_bce(&cache.logits, &domains);
        let (_, d_h) = disc.backward(&cache, &d_logits);
        let up = grl_backward(&d_h, lambda);
        let analytic = [
            up.data.iter().zip(&xs).map(|(g, x)| g * x).sum::<f64>(),
            up.data.iter().sum::<f64>(),
        ];
        let eps = 1e-6;
        let fd = [
            (loss(a + eps, b) - loss(a - eps, b)) / (2.0 * eps),
            (loss(a, b + eps) - loss(a, b - eps)) / (2.0 * eps),
        ];
        for k in 0..2 {
            let expect = -lambda * fd[k];
            let denom = expect.abs().max(analytic[k].abs());
            let err = if denom == 0.0 { 0.0 } else { (analytic[k] - expect).abs() / denom };
            worst = worst.max(err);
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} (limit 1e-4)"))
}

// 2. Every parameter gradient of a tiny network against central finite
// differences of the training-mode loss.
fn network_gradient_check() -> Outcome {
    let cfg = RfResNetConfig::tiny([8, 8], 2);
    let mut model = RfResNet::new(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 3;
    let x = Tensor::from_vec(n, 1, 8, 8, (0..n * 64).map(|_| normal(&mut rng)).collect());
    let labels: Vec<[f64; 7]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(1.0..10.0))).collect();
    let fwd = model.forward_train(&x).unwrap();
    let (_, d_out) = mse_loss(&fwd.output, &labels);
    let grads = model.backward(&fwd, &d_out);

    let loss_at = |m: &RfResNet| mse_loss(&m.forward_train(&x).unwrap().output, &labels).0;
    let eps = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let mut worst_name = String::new();
    for e in 0..model.params.len() {
        if model.params.entries()[e].kind != ParamKind::Weight {
            continue;
        }
        for j in 0..model.params.entries()[e].data.len() {
            let orig = model.params.entries()[e].data[j];
            model.params.entries_mut()[e].data[j] = orig + eps;
            let up = loss_at(&model);
            model.params.entries_mut()[e].data[j] = orig - eps;
            let down = loss_at(&model);
            model.params.entries_mut()[e].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.data[e][j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst {
                worst = err;
                worst_name = format!("{}[{j}]", model.params.entries()[e].name);
            }
            checked += 1;
        }
    }
    outcome(
        worst < 1e-3,
        format!("{checked} parameters, max relative error {worst:.2e} at {worst_name} (limit 1e-3)"),
    )
}

// 3. Spectrogram shape law.
fn spectrogram_shape() -> Outcome {
    let cfg = SpectrogramConfig::default();
    let n = 15 * cfg.sample_rate as usize;
    let pcm: Vec<f32> = (0..n).map(|i| (i as f32 * 0.031).sin() * 0.3).collect();
    let canonical = compute_spectrogram(&pcm, &cfg).unwrap().shape();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    for _ in 0..25 {
        let len = rng.random_range(cfg.window_size..20 * cfg.sample_rate as usize);
        let pcm: Vec<f32> = (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let shape = compute_spectrogram(&pcm, &cfg).unwrap().shape();
        if shape != (cfg.bands, len / cfg.hop) {
            bad.push((len, shape));
        }
    }
    outcome(
        canonical == (149, 469) && bad.is_empty(),
        format!("canonical {}x{}; {} of 25 random lengths off the floor(N/hop) law", canonical.0, canonical.1, bad.len()),
    )
}

// 4. Discrepancy against the kernel expansion of the squared mean
// difference, plus symmetry, zero and scale properties.
fn discrepancy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let id = |v: &Vec<f64>| v.clone();
    let mut worst: f64 = 0.0;
    let mut props = true;
    for _ in 0..50 {
        let d = rng.random_range(1..16);
        let m = rng.random_range(1..30);
        let n = rng.random_range(1..30);
        let shift = rng.random_range(-2.0..2.0);
        let s: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let t: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng) + shift).collect()).collect();
        let dot = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter().map(|x| b.iter().map(|y| dot(x, y)).sum::<f64>()).sum::<f64>() / (a.len() * b.len()) as f64
        };
        let oracle = (mean_k(&s, &s) + mean_k(&t, &t) - 2.0 * mean_k(&s, &t)).max(0.0).sqrt();
        let value = domain_discrepancy(id, &s, &t).unwrap().value;
        worst = worst.max((value - oracle).abs());

        let swapped = domain_discrepancy(id, &t, &s).unwrap().value;
        let zero = domain_discrepancy(id, &s, &s).unwrap().value;
        let c = rng.random_range(-3.0..3.0);
        let scaled = domain_discrepancy(|v: &Vec<f64>| v.iter().map(|x| c * x).collect(), &s, &t).unwrap().value;
        props &= swapped == value && zero == 0.0 && (scaled - c.abs() * value).abs() <= 1e-12 * (1.0 + value.abs());
    }
    outcome(
        worst <= 1e-12 && props,
        format!("max |value - oracle| {worst:.2e} (limit 1e-12); symmetry/zero/scale {}", if props { "hold" } else { "violated" }),
    )
}

// 5. Synthetic pipeline effect over five seeds.
fn synthetic_pipeline() -> Outcome {
    let cfg = PipelineConfig::default();
    let clips = cfg.data.n_source + cfg.data.n_target_pool + cfg.data.n_target_test;
    let (mut a, mut b, mut c, mut d, mut vs_ensemble) = (0, 0, 0, 0, 0);
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let run = run_synthetic_pipeline(&cfg, seed).expect("pipeline run");
        let r = run.report;
        let floor = 0.95 * r.baseline.source_val_r;
        let oks = [
            r.da_target_mse < r.baseline.target_mse,
            r.student.target_mse <= r.da_target_mse,
            r.baseline.discrepancy > r.da_discrepancy && r.da_discrepancy > r.student.discrepancy,
            r.da_source_val_r >= floor && r.student.source_val_r >= floor,
        ];
        a += oks[0] as usize;
        b += oks[1] as usize;
        c += oks[2] as usize;
        d += oks[3] as usize;
        vs_ensemble += (r.student.target_mse <= r.ensemble_target_mse) as usize;
        lines.push(format!(
            "    seed {seed}: target mse {:.3} / {:.3} / {:.3}, discrepancy {:.3} / {:.3} / {:.3}, val r {:.4} / {:.4} / {:.4}",
            r.baseline.target_mse,
            r.da_target_mse,
            r.student.target_mse,
            r.baseline.discrepancy,
            r.da_discrepancy,
            r.student.discrepancy,
            r.baseline.source_val_r,
            r.da_source_val_r,
            r.student.source_val_r
        ));
    }
    let pass = clips <= 2000 && a >= 4 && b >= 4 && c >= 4 && d >= 5;
    outcome(
        pass,
        format!(
            "{clips} clips; (a) DA < baseline {a}/5, (b) student <= DA {b}/5, (c) discrepancy decreasing {c}/5, \
             (d) source score within 5% {d}/5; \
             student <= averaged-prediction ensemble {vs_ensemble}/5 (informational)\n    (baseline / DA teacher mean / student)\n{}",
            lines.join("\n")
        ),
    )
}

// Log-gamma by the Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

// Two-sided p of a t statistic by composite Simpson quadrature of the
// density over [0, |t|].
fn t_two_sided_p(t: f64, df: f64) -> f64 {
    let norm = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let f = |u: f64| norm * (1.0 + u * u / df).powf(-(df + 1.0) / 2.0);
    let steps = 20_000;
    let h = t.abs() / steps as f64;
    let mut acc = f(0.0) + f(t.abs());
    for i in 1..steps {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    (1.0 - 2.0 * acc * h / 3.0).max(0.0)
}

// Gaussian elimination with partial pivoting on the normal equations.
fn ols_oracle(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let p = x[0].len() + 1;
    let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(x[i].iter().copied()).collect() };
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..x.len() {
        let r = row(i);
        for j in 0..p {
            for k in 0..p {
                a[j][k] += r[j] * r[k];
            }
            a[j][p] += r[j] * y[i];
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=p {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..p).map(|j| a[j][p] / a[j][j]).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let (mut res, mut tot) = (0.0, 0.0);
    for i in 0..x.len() {
        let fit: f64 = row(i).iter().zip(&beta).map(|(a, b)| a * b).sum();
        res += (y[i] - fit).powi(2);
        tot += (y[i] - mean).powi(2);
    }
    (beta, 1.0 - res / tot)
}

// 6. Pearson (r, p) and OLS against independent oracles; selection
// boundaries.
fn statistics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut r_err, mut p_err, mut ols_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(8..60);
        let rho = rng.random_range(-0.9..0.9);
        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| rho * v + normal(&mut rng)).collect();
        let (r, p) = pearson_with_p(&x, &y).unwrap();
        let (mx, my) = (x.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let r_o = sxy / (sxx * syy).sqrt();
        let df = (n - 2) as f64;
        let p_o = t_two_sided_p(r_o * (df / (1.0 - r_o * r_o)).sqrt(), df);
        r_err = r_err.max((r - r_o).abs());
        p_err = p_err.max((p - p_o).abs());

        let rows = rng.random_range(20..80);
        let feats: Vec<Vec<f64>> = (0..rows).map(|_| (0..7).map(|_| normal(&mut rng)).collect()).collect();
        let w: Vec<f64> = (0..7).map(|_| normal(&mut rng)).collect();
        let target: Vec<f64> = feats
            .iter()
            .map(|f| 0.3 + f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 2.0 * normal(&mut rng))
            .collect();
        let probe = fit_linear_probe(&feats, &target).unwrap();
        let (beta, r2) = ols_oracle(&feats, &target);
        ols_err = ols_err.max((probe.intercept - beta[0]).abs()).max((probe.r2 - r2).abs());
        for (a, b) in probe.weights.iter().zip(&beta[1..]) {
            ols_err = ols_err.max((a - b).abs());
        }
    }
    let mk = |feature, r, p| FeatureCorrelation {
        feature,
        dimension: 0,
        r,
        p,
    };
    let report = ProbeReport {
        model: "boundary".into(),
        r2: vec![0.0],
        correlations: vec![mk(0, 0.20, 0.001), mk(1, -0.20, 0.001), mk(2, 0.21, 0.05), mk(3, -0.21, 0.049), mk(4, 0.5, 0.01)],
    };
    let picked: Vec<usize> = select_explanatory_features(&report, 0, R_THRESHOLD, P_THRESHOLD)
        .iter()
        .map(|c| c.feature)
        .collect();
    let boundary = picked == vec![4, 3];
    outcome(
        r_err <= 1e-6 && p_err <= 1e-6 && ols_err <= 1e-8 && boundary,
        format!(
            "max |r| err {r_err:.1e}, |p| err {p_err:.1e} (limit 1e-6); OLS/R2 err {ols_err:.1e} (limit 1e-8); strict boundaries {}",
            if boundary { "hold" } else { "violated" }
        ),
    )
}

// 7. Pseudo-label algebra and deterministic top-k selection.
fn teacher_student_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok_mean = true;
    let mut ok_perm = true;
    let mut ok_bounds = true;
    for _ in 0..50 {
        let k = rng.random_range(1..6);
        let clips = rng.random_range(1..20);
        let ids: Vec<String> = (0..k).map(|i| format!("t{i}")).collect();
        let preds: Vec<Vec<MidLevelVector>> = (0..k)
            .map(|_| (0..clips).map(|_| MidLevelVector(std::array::from_fn(|_| rng.random_range(-2.0..12.0)))).collect())
            .collect();
        let pairs: Vec<(&str, &[MidLevelVector])> = ids.iter().map(String::as_str).zip(preds.iter().map(Vec::as_slice)).collect();
        let means = ensemble_mean(&pairs).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        shuffled.rotate_left(k / 2);
        let again = ensemble_mean(&shuffled).unwrap();
        ok_perm &= means
            .iter()
            .zip(&again)
            .all(|(a, b)| a.unwrap().0.map(f64::to_bits) == b.unwrap().0.map(f64::to_bits));
        for (c, m) in means.iter().enumerate() {
            let m = m.unwrap();
            for j in 0..7 {
                let vals: Vec<f64> = preds.iter().map(|p| p[c].0[j]).collect();
                let naive = vals.iter().sum::<f64>() / k as f64;
                ok_mean &= (m.0[j] - naive).abs() <= 1e-12;
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ok_bounds &= m.0[j] >= lo && m.0[j] <= hi;
            }
        }
    }

    // Real checkpoints: teacher order must not matter bit-for-bit.
    let cfg = RfResNetConfig::tiny([8, 8], 2);
    let teachers: Vec<_> = (0..3).map(|s| build_model(&cfg, 40 + s).unwrap()).collect();
    let clips: Vec<Sample> = (0..5)
        .map(|i| Sample {
            id: format!("clip{i}"),
            input: std::sync::Arc::new(
                Spectrogram::new(8, 8, (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap(),
            ),
            label: None,
        })
        .collect();
    let fwd: Vec<_> = teachers.iter().collect();
    let rev: Vec<_> = teachers.iter().rev().collect();
    let a = pseudo_label(&fwd, &clips, false).unwrap();
    let b = pseudo_label(&rev, &clips, false).unwrap();
    ok_perm &= a.teacher_ids == b.teacher_ids
        && a.subset_hash == b.subset_hash
        && a.samples.iter().zip(&b.samples).all(|(x, y)| x.label.unwrap().0.map(f64::to_bits) == y.label.unwrap().0.map(f64::to_bits));

    let mut ok_topk = true;
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let scored: Vec<(String, f64)> = (0..n)
            .map(|i| (format!("ckpt-{:02}", rng.random_range(0..100) * 100 + i), (rng.random_range(0..4) as f64) / 4.0))
            .collect();
        let k = rng.random_range(1..=n);
        let got = top_k(&scored, k).unwrap();
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|&x, &y| {
            let (a, b) = (&scored[x], &scored[y]);
            b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
        });
        let mut reversed = scored.clone();
        reversed.reverse();
        let again: Vec<&str> = top_k(&reversed, k).unwrap().iter().map(|&i| reversed[i].0.as_str()).collect();
        let first: Vec<&str> = got.iter().map(|&i| scored[i].0.as_str()).collect();
        ok_topk &= got == oracle[..k] && first == again;
    }
    let pass = ok_mean && ok_perm && ok_bounds && ok_topk;
    outcome(
        pass,
        format!("mean {ok_mean}, permutation invariance {ok_perm}, min/max bounds {ok_bounds}, top-k determinism {ok_topk}"),
    )
}

// 8. Artist-exclusive split on 1,000 randomized manifests.
fn split_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fr = SplitFractions::default();
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let artists = rng.random_range(60..250);
        let mut records = Vec::new();
        for a in 0..artists {
            for c in 0..rng.random_range(1..6) {
                records.push(ClipRecord {
                    clip_id: format!("a{a}-c{c}"),
                    audio_path: PathBuf::from(format!("a{a}/c{c}.wav")),
                    artist: format!("artist{a}"),
                    domain: Domain::Source,
                    labels: Some(MidLevelVector([5.0; 7])),
                });
            }
        }
        let split = match split_by_artist(&records, fr, trial) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("trial {trial}: {e}"));
                continue;
            }
        };
        let buckets = [&split.train, &split.validation, &split.test];
        let all: BTreeSet<&String> = buckets.iter().flat_map(|b| b.iter()).collect();
        let total: usize = buckets.iter().map(|b| b.len()).sum();
        let coverage = total == records.len() && all.len() == records.len();
        let mut artist_bucket: BTreeMap<&str, HashSet<usize>> = BTreeMap::new();
        for r in &records {
            let b = buckets.iter().position(|b| b.contains(&r.clip_id)).unwrap_or(usize::MAX);
            artist_bucket.entry(r.artist.as_str()).or_default().insert(b);
        }
        let exclusive = artist_bucket.values().all(|s| s.len() == 1);
        let n = records.len() as f64;
        let within = [fr.train, fr.validation, fr.test]
            .iter()
            .zip(&buckets)
            .all(|(f, b)| (b.len() as f64 / n - f).abs() <= SPLIT_TOLERANCE);
        if !(coverage && exclusive && within) {
            failures.push(format!("trial {trial}: coverage {coverage} exclusive {exclusive} fractions {within}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} of 1000 manifests violated a property{}", failures.len(), failures.first().map(|f| format!(" ({f})")).unwrap_or_default()),
    )
}

fn dir_contents(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run.log") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

// 9. Two synth-e2e runs with the same configuration.
fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let args = |dir: &str| -> Vec<String> {
        let mut v: Vec<String> = ["midlevel", "synth-e2e", "--exp-dir"].iter().map(|s| s.to_string()).collect();
        v.push(tmp.path().join(dir).display().to_string());
        for s in [
            "synthetic_seeds=[1, 2]",
            "synthetic.data.n_source=200",
            "synthetic.data.n_target_pool=200",
            "synthetic.data.n_target_test=60",
            "synthetic.train.max_epochs=4",
            "synthetic.distill.candidates=3",
            "synthetic.distill.k=2",
        ] {
            v.push("--set".into());
            v.push(s.into());
        }
        v
    };
    for d in ["a", "b"] {
        let cli = Cli::try_parse_from(args(d)).unwrap();
        if let Err(e) = cli::run(&cli) {
            return outcome(false, format!("synth-e2e failed: {e}"));
        }
    }
    let (a, b) = (dir_contents(&tmp.path().join("a")), dir_contents(&tmp.path().join("b")));
    let ckpts = a.keys().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let pass = a.len() == b.len() && differing.is_empty() && ckpts > 0 && a.contains_key(Path::new("summary.json"));
    outcome(
        pass,
        format!("{} files ({ckpts} checkpoints) compared; {} differ {:?}", a.len(), differing.len(), differing),
    )
}

// Receptive field by tracking the input interval that one output unit
// depends on, layer by layer from the output back to the input.
fn rf_by_interval(cfg: &RfResNetConfig) -> (usize, usize) {
    let layers = cfg.rf_layers();
    let mut size = [0usize; 2];
    for axis in 0..2 {
        let (mut lo, mut hi) = (0i64, 0i64);
        for &(k, s) in layers.iter().rev() {
            let k = k[axis] as i64;
            lo *= s as i64;
            hi = hi * s as i64 + k - 1;
        }
        size[axis] = (hi - lo + 1) as usize;
    }
    (size[0], size[1])
}

// 10. Receptive field of the default network against the reference.
fn receptive_field_regularization() -> Outcome {
    let rf = RfResNetConfig::default();
    let reference = RfResNetConfig::reference_resnet();
    let (a, b) = (receptive_field(&rf), receptive_field(&reference));
    let oracle_ok = rf_by_interval(&rf) == a && rf_by_interval(&reference) == b;
    outcome(
        oracle_ok && a.0 < b.0 && a.1 < b.1,
        format!("RF-ResNet {a:?} vs reference {b:?}; interval oracle {}", if oracle_ok { "agrees" } else { "disagrees" }),
    )
}

fn main() {
    // Keep the CLI runs quiet; their logs also go to files.
    std::env::set_var("RUST_LOG", "warn");
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("GRL correctness", grl_correctness, Duration::from_secs(1)),
        ("network gradient check", network_gradient_check, Duration::from_secs(30)),
        ("spectrogram shape law", spectrogram_shape, Duration::from_secs(10)),
        ("discrepancy oracle", discrepancy_oracle, Duration::from_secs(5)),
        ("synthetic pipeline effect", synthetic_pipeline, Duration::from_secs(30 * 60)),
        ("statistics oracles", statistics_oracles, Duration::from_secs(5)),
        ("teacher-student algebra", teacher_student_algebra, Duration::from_secs(5)),
        ("split integrity", split_integrity, Duration::from_secs(10)),
        ("reproducibility", reproducibility, Duration::MAX),
        ("receptive-field regularization", receptive_field_regularization, Duration::MAX),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let in_time = took <= *limit;
        let pass = o.pass && in_time;
        failed += !pass as usize;
        let budget = if *limit == Duration::MAX {
            String::new()
        } else {
            format!(", limit {:.0?}", limit)
        };
        println!(
            "criterion {:>2} {}: {} ({:.2?}{budget}) {}",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            took,
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
