mod common;

use common::*;
use hamur_core::adapter::Mode;
use hamur_core::backbone::BackboneKind;
use hamur_core::data::{Batch, Dataset};
use hamur_core::model::{bce_loss, HamurModel, Sharing};
use hamur_core::optim::{AdamConfig, AdamState};
use hamur_core::tape::Tape;
use hamur_core::tensor::Tensor;
use hamur_core::Error;

const KINDS: [BackboneKind; 3] = [BackboneKind::Mlp, BackboneKind::Dcn, BackboneKind::WideDeep];

fn batch_loss(model: &HamurModel, batch: &Batch) -> f64 {
    let mut fwd = model.forward_batch(batch, Mode::Train).unwrap();
    let y = fwd.tape.constant(Tensor::new([batch.len(), 1], batch.labels.clone()).unwrap());
    let l = bce_loss(&mut fwd.tape, fwd.probs, y).unwrap();
    fwd.tape.value(l).data()[0]
}

#[test]
fn parameter_count_is_a_function_of_config() {
    for kind in KINDS {
        for adapters in [false, true] {
            for sharing in [Sharing::PerDomain, Sharing::Shared] {
                let mut cfg = toy_config(kind, 3, adapters);
                cfg.sharing = sharing;
                cfg.adapter.sites = vec![1, 2];
                let a = HamurModel::new(cfg.clone(), 1).unwrap();
                let b = HamurModel::new(cfg.clone(), 99).unwrap();
                assert_eq!(a.store.num_scalars(), cfg.param_count(), "{kind} {adapters} {sharing:?}");
                assert_eq!(b.store.num_scalars(), cfg.param_count());
            }
        }
    }
}

#[test]
fn one_hyper_network_and_per_domain_cells() {
    let cfg = toy_config(BackboneKind::Mlp, 3, true);
    let m = HamurModel::new(cfg, 1).unwrap();
    let hyper_params = m.store.iter().filter(|(_, p)| p.name.starts_with("hyper.")).count();
    assert_eq!(hyper_params, 4);
    assert_eq!(m.adapters.len(), 3);
    assert_eq!(m.backbones.len(), 3);
    for cells in &m.adapters {
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].factors.width, 6);
        assert_eq!(cells[0].factors.bottleneck, 2);
    }
}

#[test]
fn hyper_network_emits_fewer_values_than_direct_generation() {
    // MovieLens MLP settings: k = 35, s = 32, first hidden width 256.
    let (k, s, h) = (35usize, 32usize, 256usize);
    assert!(k * k < 2 * s * h);
}

#[test]
fn zero_parameters_predict_one_half() {
    for kind in KINDS {
        let mut m = HamurModel::new(toy_config(kind, 2, true), 3).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            let shape = m.store.get(id).shape().to_vec();
            *m.store.get_mut(id) = Tensor::zeros(shape);
        }
        let ds = toy_dataset(6, 2, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let fwd = m.forward_batch(&whole_batch(&ds), mode).unwrap();
            assert!(fwd.predictions().iter().all(|&p| p == 0.5), "{kind}");
        }
    }
}

#[test]
fn single_domain_batch_matches_mixed_batch_in_eval() {
    let mut m = HamurModel::new(toy_config(BackboneKind::Dcn, 3, true), 4).unwrap();
    randomize(&mut m, 4);
    let ds = toy_dataset(9, 3, 2);
    let mixed = m.forward_batch(&whole_batch(&ds), Mode::Eval).unwrap();
    let rows: Vec<usize> = (0..9).filter(|&i| ds.domain(i) == 2).collect();
    let single = m.forward_batch(&Batch::from_rows(&ds, &rows), Mode::Eval).unwrap();
    let expected: Vec<f64> = rows.iter().map(|&r| mixed.predictions()[r]).collect();
    assert_eq!(single.predictions(), expected.as_slice());
}

#[test]
fn train_mode_matches_instance_loop_with_singleton_groups() {
    for kind in KINDS {
        let mut m = HamurModel::new(toy_config(kind, 3, true), 5).unwrap();
        randomize(&mut m, 5);
        let ds = toy_dataset(3, 3, 3);
        let grouped = m.forward_batch(&whole_batch(&ds), Mode::Train).unwrap();
        for i in 0..3 {
            let one = m.forward_batch(&Batch::from_rows(&ds, &[i]), Mode::Train).unwrap();
            assert_eq!(one.predictions()[0], grouped.predictions()[i], "{kind}");
        }
    }
}

#[test]
fn absent_domains_are_untouched_by_a_step() {
    let mut m = HamurModel::new(toy_config(BackboneKind::WideDeep, 3, true), 6).unwrap();
    let ds = toy_dataset(12, 3, 4);
    let rows: Vec<usize> = (0..12).filter(|&i| ds.domain(i) != 2).collect();
    let batch = Batch::from_rows(&ds, &rows);
    let before = m.clone();
    let mut adam = AdamState::new(AdamConfig::default(), &m.store);
    m.train_step(&batch, &mut adam).unwrap();
    for (id, p) in m.store.iter() {
        let old = before.store.get(id);
        let touched = p.value != *old;
        let domain2 = p.name.contains(".d2.") || p.name.starts_with("backbone.d2");
        if domain2 {
            assert!(!touched, "{} changed", p.name);
        } else if (p.name.starts_with("embedding") || p.name.starts_with("hyper") || p.name.contains("d1") || p.name.contains("d3"))
            && !p.name.contains("wide")
        {
            assert!(touched, "{} did not change", p.name);
        }
    }
    assert_eq!(m.adapters[1], before.adapters[1]);
    assert_ne!(m.adapters[0][0].norm.running_mean, before.adapters[0][0].norm.running_mean);
}

#[test]
fn running_stats_are_isolated_per_domain() {
    let m0 = HamurModel::new(toy_config(BackboneKind::Mlp, 2, true), 7).unwrap();
    let ds = toy_dataset(10, 2, 5);
    let only1: Vec<usize> = (0..10).filter(|&i| ds.domain(i) == 1).collect();
    let mut a = m0.clone();
    let fa = a.forward_batch(&whole_batch(&ds), Mode::Train).unwrap();
    a.apply_stats(&fa.stats).unwrap();
    let mut b = m0.clone();
    let fb = b.forward_batch(&Batch::from_rows(&ds, &only1), Mode::Train).unwrap();
    b.apply_stats(&fb.stats).unwrap();
    assert_eq!(a.adapters[0][0].norm, b.adapters[0][0].norm);
    assert_ne!(a.adapters[1][0].norm, b.adapters[1][0].norm);
    assert_eq!(b.adapters[1][0].norm, m0.adapters[1][0].norm);
}

#[test]
fn perturbing_one_backbone_only_moves_its_domain() {
    for kind in KINDS {
        let mut m = HamurModel::new(toy_config(kind, 3, false), 8).unwrap();
        let ds = toy_dataset(9, 3, 6);
        let before = m.predict(&ds, 4).unwrap();
        let out_b = m.backbones[1].output.b;
        m.store.get_mut(out_b).data_mut()[0] += 0.5;
        let after = m.predict(&ds, 4).unwrap();
        for i in 0..9 {
            assert_eq!(before[i] != after[i], ds.domain(i) == 2, "{kind} row {i}");
        }
    }
}

#[test]
fn output_shape_is_independent_of_adapters() {
    for kind in KINDS {
        let ds = toy_dataset(7, 2, 7);
        for adapters in [false, true] {
            let m = HamurModel::new(toy_config(kind, 2, adapters), 9).unwrap();
            let fwd = m.forward_batch(&whole_batch(&ds), Mode::Train).unwrap();
            assert_eq!(fwd.tape.shape(fwd.probs), &[7, 1]);
        }
    }
}

#[test]
fn same_seed_shares_embeddings_and_backbones() {
    let with = HamurModel::new(toy_config(BackboneKind::Dcn, 2, true), 10).unwrap();
    let mut without = HamurModel::new(toy_config(BackboneKind::Dcn, 2, false), 10).unwrap();
    let before = without.clone();
    let copied = copy_shared_params(&with, &mut without);
    assert_eq!(copied, without.store.len());
    assert_eq!(without, before);
}

#[test]
fn one_step_on_one_instance_lowers_its_loss() {
    for kind in KINDS {
        let mut m = HamurModel::new(toy_config(kind, 2, true), 11).unwrap();
        let ds = toy_dataset(1, 2, 8);
        let batch = whole_batch(&ds);
        let mut adam = AdamState::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &m.store);
        let l0 = m.train_step(&batch, &mut adam).unwrap();
        let l1 = batch_loss(&m, &batch);
        assert!(l1 < l0, "{kind}: {l0} -> {l1}");
    }
}

#[test]
fn batch_with_unknown_domain_is_rejected() {
    let m = HamurModel::new(toy_config(BackboneKind::Mlp, 2, true), 12).unwrap();
    let ds: Dataset = toy_dataset(6, 3, 9);
    match m.forward_batch(&whole_batch(&ds), Mode::Eval) {
        Err(Error::Data(msg)) => assert!(msg.contains("domain"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("accepted a batch with domain 3"),
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let mut cfg = toy_config(BackboneKind::Mlp, 2, true);
    cfg.adapter.bottleneck = 6;
    let err = HamurModel::new(cfg, 1).unwrap_err().to_string();
    assert!(err.contains("adapter.bottleneck"), "{err}");

    let mut cfg = toy_config(BackboneKind::Mlp, 2, true);
    cfg.adapter.sites = vec![3];
    let err = HamurModel::new(cfg, 1).unwrap_err().to_string();
    assert!(err.contains("adapter.sites"), "{err}");

    let mut cfg = toy_config(BackboneKind::Mlp, 2, true);
    cfg.hyper.rank = 0;
    assert!(HamurModel::new(cfg, 1).unwrap_err().to_string().contains("hyper.rank"));
}

#[test]
fn prediction_loss_matches_logloss() {
    let mut m = HamurModel::new(toy_config(BackboneKind::Mlp, 2, true), 13).unwrap();
    randomize(&mut m, 13);
    let ds = toy_dataset(8, 2, 10);
    let batch = whole_batch(&ds);
    let fwd = m.forward_batch(&batch, Mode::Train).unwrap();
    let ll = hamur_core::metrics::logloss(fwd.predictions(), ds.labels()).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new([8, 1], fwd.predictions().to_vec()).unwrap());
    let y = tape.constant(Tensor::new([8, 1], batch.labels.clone()).unwrap());
    let l = bce_loss(&mut tape, p, y).unwrap();
    assert!((tape.value(l).data()[0] - ll).abs() < 1e-12);
}

#[test]
fn eval_forward_matches_per_instance_oracle() {
    for kind in KINDS {
        for adapters in [false, true] {
            let mut m = HamurModel::new(toy_config(kind, 3, adapters), 14).unwrap();
            randomize(&mut m, 14);
            randomize_running_stats(&mut m, 15);
            let ds = toy_dataset(8, 3, 11);
            let fwd = m.forward_batch(&whole_batch(&ds), Mode::Eval).unwrap();
            for i in 0..8 {
                let p = common::oracle::predict_one(&m, ds.features(i), ds.domain(i));
                assert!((fwd.predictions()[i] - p).abs() <= 1e-12, "{kind} {adapters} row {i}");
            }
        }
    }
}

#[test]
fn composed_gradients_match_finite_differences() {
    for kind in KINDS {
        for seed in [1, 2] {
            let c = check_model_gradients(kind, seed);
            assert!(c.passes(), "{kind} seed {seed}: rel {:e} roundoff ratio {:e}", c.worst_rel, c.worst_abs_small);
        }
    }
}
