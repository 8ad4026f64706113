mod common;

use std::collections::BTreeSet;

use midlevel_core::data::Sample;
use midlevel_core::net::{
    build_model, load_checkpoint, receptive_field, receptive_field_of, save_checkpoint, RfResNetConfig, Tensor,
};
use midlevel_core::train::{mse_loss, supervised_step, Adam};
use proptest::prelude::*;

/// Extent of the input positions one output unit depends on, by walking
/// index sets back through the stack. Strides larger than the kernel leave
/// gaps inside the extent.
fn dependency_span(layers: &[([usize; 2], usize)], axis: usize) -> usize {
    let mut set: BTreeSet<usize> = [0].into();
    for &(k, s) in layers.iter().rev() {
        set = set.iter().flat_map(|&i| (0..k[axis]).map(move |o| i * s + o)).collect();
    }
    set.last().unwrap() - set.first().unwrap() + 1
}

#[test]
fn default_network_output_geometry() {
    let cfg = RfResNetConfig::default();
    assert_eq!(cfg.input_shape, [149, 469]);
    let (h, w) = cfg.spatial_output().unwrap();
    assert!(h > 0 && w > 0);
    let rf = receptive_field(&cfg);
    assert_eq!(rf, (dependency_span(&cfg.rf_layers(), 0), dependency_span(&cfg.rf_layers(), 1)));
    let reference = RfResNetConfig::reference_resnet();
    let r = receptive_field(&reference);
    assert!(rf.0 < r.0 && rf.1 < r.1, "{rf:?} vs {r:?}");
}

#[test]
fn seven_outputs_and_finite_on_silence() {
    let cfg = RfResNetConfig::tiny([16, 32], 2);
    let m = build_model(&cfg, 0).unwrap().model;
    let x = Tensor::zeros(3, 1, 16, 32);
    let (emb, out) = m.forward_eval(&x).unwrap();
    assert_eq!(out.shape(), [3, 7, 1, 1]);
    assert!(out.all_finite() && emb.all_finite());
    let fwd = m.forward_train(&x).unwrap();
    assert!(fwd.output.all_finite());
}

#[test]
fn checkpoint_file_round_trip_is_bitwise() {
    let (cfg, s) = common::splits(90, 1);
    let mut ckpt = build_model(&cfg.model_config(), 5).unwrap();
    // Take a few training steps so batch-norm buffers are non-trivial.
    let mut opt = Adam::new(&ckpt.model.params);
    let batch: Vec<&Sample> = s.train.iter().take(8).collect();
    for b in 0..3 {
        supervised_step(&mut ckpt.model, &mut opt, &batch, 1e-3, 1, b).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let inputs: Vec<_> = s.val.iter().map(|x| x.input.as_ref()).collect();
    let a = ckpt.model.predict(&inputs).unwrap();
    let b = back.model.predict(&inputs).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.0.map(f64::to_bits), q.0.map(f64::to_bits));
    }
}

#[test]
fn overfits_a_single_batch() {
    let (cfg, s) = common::splits(90, 2);
    let mut m = build_model(&cfg.model_config(), 2).unwrap().model;
    let batch: Vec<&Sample> = s.train.iter().take(4).collect();
    let mut opt = Adam::new(&m.params);
    for step in 0..600 {
        supervised_step(&mut m, &mut opt, &batch, 3e-3, 1, step).unwrap();
    }
    // Train-mode forward, so batch statistics match what was fitted.
    let inputs: Vec<_> = batch.iter().map(|x| x.input.as_ref()).collect();
    let fwd = m.forward_train(&m.input_tensor(&inputs).unwrap()).unwrap();
    let labels: Vec<_> = batch.iter().map(|x| x.label.unwrap().0).collect();
    let (loss, _) = mse_loss(&fwd.output, &labels);
    assert!(loss < 0.05, "loss after overfitting {loss}");
}

#[test]
fn same_seed_same_model_different_seed_differs() {
    let cfg = RfResNetConfig::tiny([12, 24], 4);
    assert_eq!(build_model(&cfg, 3).unwrap().model, build_model(&cfg, 3).unwrap().model);
    assert_ne!(build_model(&cfg, 3).unwrap().model.params, build_model(&cfg, 4).unwrap().model.params);
}

fn arb_layers() -> impl Strategy<Value = Vec<([usize; 2], usize)>> {
    proptest::collection::vec(((1usize..8, 1usize..8), 1usize..4), 0..8)
        .prop_map(|v| v.into_iter().map(|((a, b), s)| ([a, b], s)).collect())
}

proptest! {
    #[test]
    fn receptive_field_matches_dependency_span(layers in arb_layers()) {
        let rf = receptive_field_of(&layers);
        prop_assert_eq!(rf, (dependency_span(&layers, 0), dependency_span(&layers, 1)));
    }

    #[test]
    fn adding_a_layer_never_shrinks_the_field(layers in arb_layers(), k in 1usize..6, s in 1usize..3) {
        let before = receptive_field_of(&layers);
        let mut more = layers.clone();
        more.push(([k, k], s));
        let after = receptive_field_of(&more);
        prop_assert!(after.0 >= before.0 && after.1 >= before.1);
    }

    #[test]
    fn eval_predictions_do_not_depend_on_batch_mates(seed in 0u64..50, pos in 0usize..6) {
        let (cfg, s) = common::splits(60, seed);
        let m = build_model(&cfg.model_config(), seed).unwrap().model;
        let inputs: Vec<_> = s.train.iter().take(6).map(|x| x.input.as_ref()).collect();
        let all = m.predict(&inputs).unwrap();
        let one = m.predict(&[inputs[pos]]).unwrap();
        for j in 0..7 {
            prop_assert!((all[pos].0[j] - one[0].0[j]).abs() <= 1e-5);
        }
    }
}
