#![allow(clippy::needless_range_loop)]
mod common;

use midlevel_core::da::{
    da_losses, da_train_step, discriminator_accuracy, domain_bce, grl_backward, grl_forward, train_da,
    train_probe_discriminator, DaOptimizers, DomainGradient, GrlConfig, LambdaSchedule, MixedBatch,
};
use midlevel_core::data::Sample;
use midlevel_core::net::{build_model, Discriminator, RfResNet, Tensor};
use midlevel_core::train::{mse_loss, train_supervised};
use midlevel_core::Error;
use proptest::prelude::*;

fn bits(m: &RfResNet) -> Vec<u64> {
    m.params.entries().iter().flat_map(|e| e.data.iter().map(|v| v.to_bits())).collect()
}

fn disc_bits(d: &Discriminator) -> Vec<u64> {
    d.params.entries().iter().flat_map(|e| e.data.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_lambda_step_matches_detached_step() {
    let (cfg, s) = common::splits(120, 1);
    let model = build_model(&cfg.model_config(), 3).unwrap().model;
    let disc = Discriminator::new(&cfg.discriminator_config(), 3).unwrap();
    let grl = GrlConfig {
        lambda: 0.0,
        ..GrlConfig::default()
    };
    let batch = MixedBatch::new(s.train.iter().take(6).collect(), s.target_pool.iter().take(6).collect()).unwrap();

    let run = |mode| {
        let (mut m, mut d) = (model.clone(), disc.clone());
        let mut opts = DaOptimizers::new(&m, &d);
        for step in 0..3 {
            da_train_step(&mut m, &mut d, &mut opts, &batch, &grl, step, 1e-3, mode).unwrap();
        }
        (bits(&m), disc_bits(&d))
    };
    let reversed = run(DomainGradient::Reversed);
    let detached = run(DomainGradient::Detached);
    assert_eq!(reversed.0, detached.0, "trunk/head parameters differ");
    assert_eq!(reversed.1, detached.1, "discriminator parameters differ");
    assert_ne!(reversed.1, disc_bits(&disc), "discriminator did not learn");
}

#[test]
fn zero_lambda_gives_zero_upstream_gradient() {
    let g = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE, 0.0, -7.0]);
    assert!(grl_backward(&g, 0.0).data.iter().all(|&v| v == 0.0));
    assert_eq!(grl_forward(&g).data, g.data);
}

#[test]
fn regression_loss_uses_only_the_source_half() {
    let (cfg, s) = common::splits(120, 2);
    let model = build_model(&cfg.model_config(), 1).unwrap().model;
    let disc = Discriminator::new(&cfg.discriminator_config(), 1).unwrap();
    let src: Vec<&Sample> = s.train.iter().take(8).collect();
    let tgt: Vec<&Sample> = s.target_pool.iter().take(8).collect();
    let batch = MixedBatch::new(src.clone(), tgt.clone()).unwrap();
    assert_eq!(batch.len(), 16);
    let (reg, dom) = da_losses(&model, &disc, &batch).unwrap();

    let inputs: Vec<_> = src.iter().chain(&tgt).map(|x| x.input.as_ref()).collect();
    let fwd = model.forward_train(&model.input_tensor(&inputs).unwrap()).unwrap();
    let mut sum = 0.0;
    for (i, x) in src.iter().enumerate() {
        for (j, l) in x.label.unwrap().0.iter().enumerate() {
            sum += (fwd.output.row(i)[j] - l).powi(2);
        }
    }
    assert!((reg - sum / (8.0 * 7.0)).abs() < 1e-12, "{reg} vs {}", sum / 56.0);
    let domains: Vec<u8> = (0..16).map(|i| (i >= 8) as u8).collect();
    let (bce, _, _) = domain_bce(&disc.forward(&fwd.embedding).logits, &domains);
    assert!((dom - bce).abs() < 1e-12);
}

#[test]
fn mixed_batch_rejects_bad_halves() {
    let (_, s) = common::splits(90, 2);
    assert!(MixedBatch::new(s.train.iter().take(3).collect(), s.target_pool.iter().take(2).collect()).is_err());
    assert!(MixedBatch::new(vec![], vec![]).is_err());
    assert!(MixedBatch::new(s.target_pool.iter().take(2).collect(), s.target_pool.iter().skip(2).take(2).collect()).is_err());
    assert!(MixedBatch::new(s.train.iter().take(2).collect(), s.train.iter().skip(2).take(2).collect()).is_err());
}

#[test]
fn empty_target_pool_is_a_precondition_error() {
    let (cfg, s) = common::splits(90, 3);
    let init = build_model(&cfg.model_config(), 0).unwrap();
    let err = train_da(&init, &s.train, &[], &s.val, &common::quick_train(1, 0), &cfg.grl, &cfg.discriminator_config())
        .unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
}

#[test]
fn da_log_carries_domain_statistics() {
    let (cfg, s) = common::splits(90, 4);
    let init = build_model(&cfg.model_config(), 4).unwrap();
    let (out, _) =
        train_da(&init, &s.train, &s.target_pool, &s.val, &common::quick_train(2, 4), &cfg.grl, &cfg.discriminator_config())
            .unwrap();
    assert_eq!(out.log.len(), 2);
    for r in &out.log {
        let d = r.domain.as_ref().unwrap();
        assert!(d.domain_loss.is_finite() && (0.0..=1.0).contains(&d.discriminator_accuracy));
    }
    assert_eq!(out.checkpoint.provenance.stage, midlevel_core::net::Stage::Da);
}

#[test]
fn adversary_is_confused_while_probe_separates_baseline_embeddings() {
    let (cfg, s) = common::splits(300, 6);
    let cfg = midlevel_core::pipeline::PipelineConfig { width: 8, ..cfg };
    // 240 training clips in batches of 32: 8 steps per epoch, 200 steps.
    assert_eq!(s.train.len(), 240);
    let train_cfg = midlevel_core::train::TrainConfig {
        max_epochs: 25,
        milestones: vec![],
        patience: 25,
        batch_size: 32,
        seed: 6,
        ..Default::default()
    };
    let init = build_model(&cfg.model_config(), 6).unwrap();
    let (da, disc) =
        train_da(&init, &s.train, &s.target_pool, &s.val, &train_cfg, &cfg.grl, &cfg.discriminator_config()).unwrap();
    let base = train_supervised(&init, &s.train, &s.val, &train_cfg).unwrap();

    let held_src: Vec<Sample> = s.val.iter().chain(&s.test).cloned().collect();
    let adversary = discriminator_accuracy(&da.checkpoint.model, &disc, &held_src, &s.target_test).unwrap();
    let tgt_train: Vec<Sample> = s.target_pool.iter().take(s.train.len()).cloned().collect();
    let m = &base.checkpoint.model;
    let probe = train_probe_discriminator(m, &cfg.discriminator_config(), &s.train, &tgt_train, 400, 1e-2, 1).unwrap();
    let probe_acc = discriminator_accuracy(m, &probe, &held_src, &s.target_test).unwrap();
    assert!(adversary < 0.75, "adversary accuracy {adversary}");
    assert!(probe_acc > 0.9, "probe accuracy on the baseline trunk {probe_acc}");
}

#[test]
fn sigmoid_ramp_rises_to_lambda() {
    let grl = GrlConfig {
        lambda: 2.0,
        schedule: LambdaSchedule::SigmoidRamp { steps: 100 },
        ..GrlConfig::default()
    };
    assert_eq!(grl.lambda_at(0), 0.0);
    let mut prev = 0.0;
    for s in 1..=150 {
        let l = grl.lambda_at(s);
        assert!(l >= prev && l <= 2.0);
        prev = l;
    }
    assert!((grl.lambda_at(100) - 2.0).abs() < 1e-3);
}

proptest! {
    #[test]
    fn reversal_is_linear_in_lambda(g in proptest::collection::vec(-1e3f64..1e3, 1..20), l1 in 0.01f64..5.0, l2 in 0.01f64..5.0) {
        let t = Tensor::matrix(1, g.len(), g.clone());
        let a = grl_backward(&t, l1);
        let b = grl_backward(&t, l2);
        let ab = grl_backward(&t, l1 + l2);
        for i in 0..g.len() {
            prop_assert!((a.data[i] + b.data[i] - ab.data[i]).abs() <= 1e-12 * (1.0 + g[i].abs() * (l1 + l2)));
            prop_assert_eq!(a.data[i], -l1 * g[i]);
        }
    }

    #[test]
    fn regression_loss_invariant_to_row_order(seed in 0u64..1000) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let pred: Vec<f64> = (0..n * 7).map(|i| ((i as f64) * 0.37 + seed as f64).sin() * 4.0).collect();
        let labels: Vec<[f64; 7]> = (0..n).map(|i| std::array::from_fn(|j| 1.0 + ((i * 3 + j + seed as usize) % 9) as f64)).collect();
        let (loss, _) = mse_loss(&Tensor::matrix(n, 7, pred.clone()), &labels);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let p2: Vec<f64> = order.iter().flat_map(|&i| pred[i * 7..(i + 1) * 7].to_vec()).collect();
        let l2: Vec<[f64; 7]> = order.iter().map(|&i| labels[i]).collect();
        let (loss2, _) = mse_loss(&Tensor::matrix(n, 7, p2), &l2);
        prop_assert!((loss - loss2).abs() <= 1e-6);
    }
}
