mod common;

use common::*;
use deps::numeric::{Group, Tape};
use deps::recommender::{DepsModel, ModelConfig};
use deps::simulator::{generate_world, simulate_log, WorldConfig};
use deps::training::*;
use deps::Error;

const LN2: f64 = std::f64::consts::LN_2;

fn data(seed: u64) -> TrainingData {
    let w = generate_world(&WorldConfig {
        n_users: 8,
        n_items: 7,
        horizon: 120,
        seed,
        ..WorldConfig::default()
    })
    .unwrap();
    let sim = simulate_log(&w, 120).unwrap();
    TrainingData::from_log(&sim.log, tiny_config().max_len)
}

fn cfg() -> LossConfig {
    LossConfig {
        n_p: 2,
        n_u: 2,
        n_b: 2,
        batch_size: 32,
        mlm_batch: 8,
        lr: 5e-3,
        ..LossConfig::default()
    }
}

fn constant_head(model: &mut DepsModel, r_hat: f64) {
    let m = model.mlp;
    for v in model.store.value_mut(m.w2).data_mut() {
        *v = 0.0;
    }
    model.store.value_mut(m.b2).data_mut()[0] = (r_hat / (1.0 - r_hat)).ln();
}

fn sample(user: usize, item: usize, click: bool) -> Sample {
    Sample {
        user,
        item,
        timestamp: 0,
        click,
        h_u: vec![],
        h_i: vec![],
    }
}

fn loss_value(model: &DepsModel, s: &[Sample], p: &[Propensities], mode: IpsMode, alpha: f64, clip: f64) -> f64 {
    let refs: Vec<&Sample> = s.iter().collect();
    let mut tape = Tape::new();
    let v = unbiased_loss(&mut tape, model, &refs, p, mode, alpha, clip, None).unwrap();
    tape.scalar(v)
}

#[test]
fn bce_reference_values() {
    assert!((bce(1.0, 0.5) - LN2).abs() < 1e-15);
    assert!((bce(0.0, 0.5) - LN2).abs() < 1e-15);
    assert!(bce(1.0, 1.0 - 1e-13) < 1e-12);
    assert!(bce(0.0, 1e-13) < 1e-12);
}

#[test]
fn unit_delta_with_half_propensities_weighs_two() {
    let mut model = tiny_model(3, 3, 1);
    constant_head(&mut model, (-1f64).exp());
    let p = Propensities {
        item_view: 0.5,
        user_view: 0.5,
    };
    let v = loss_value(&model, &[sample(0, 1, true)], &[p], IpsMode::Dual, 0.5, 0.05);
    assert!((v - 2.0).abs() < 1e-12, "{v}");
}

#[test]
fn no_weighting_equals_plain_bce_sum() {
    let model = tiny_model(4, 5, 2);
    let s: Vec<Sample> = (0..5).map(|k| sample(k % 4, k, k % 2 == 0)).collect();
    let p = vec![
        Propensities {
            item_view: 0.1,
            user_view: 0.3
        };
        5
    ];
    let got = loss_value(&model, &s, &p, IpsMode::None, 0.5, 0.05);
    let want: f64 = s
        .iter()
        .map(|x| {
            bce(
                x.click as u8 as f64,
                model.predict(x.user, x.item, &x.h_u, &x.h_i).unwrap(),
            )
        })
        .sum();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn five_sample_weighted_loss_by_hand() {
    let mut model = tiny_model(4, 5, 3);
    constant_head(&mut model, 0.25);
    let clicks = [true, false, true, true, false];
    let s: Vec<Sample> = (0..5).map(|k| sample(k % 4, k, clicks[k])).collect();
    let p = [
        Propensities {
            item_view: 0.5,
            user_view: 0.25,
        },
        Propensities {
            item_view: 1.0,
            user_view: 0.1,
        },
        Propensities {
            item_view: 0.2,
            user_view: 0.2,
        },
        Propensities {
            item_view: 0.05,
            user_view: 1.0,
        },
        Propensities {
            item_view: 0.4,
            user_view: 0.8,
        },
    ];
    let (pos, neg) = (4f64.ln(), (4.0f64 / 3.0).ln());
    let alpha = 0.3;
    // dual weights: 0.3/p_item + 0.7/p_user
    let dual = (0.6 + 2.8) * pos + (0.3 + 7.0) * neg + (1.5 + 3.5) * pos + (6.0 + 0.7) * pos + (0.75 + 0.875) * neg;
    let item_only = 2.0 * pos + 1.0 * neg + 5.0 * pos + 20.0 * pos + 2.5 * neg;
    let user_only = 4.0 * pos + 10.0 * neg + 5.0 * pos + 1.0 * pos + 1.25 * neg;
    for (mode, want) in [
        (IpsMode::Dual, dual),
        (IpsMode::ItemOnly, item_only),
        (IpsMode::UserOnly, user_only),
    ] {
        let got = loss_value(&model, &s, &p, mode, alpha, 0.05);
        assert!((got - want).abs() < 1e-9 * want, "{mode:?}: {got} vs {want}");
    }
}

#[test]
fn weights_by_mode() {
    let p = Propensities {
        item_view: 0.2,
        user_view: 0.5,
    };
    assert_eq!(ips_weight(IpsMode::None, 0.5, p, 0.05).unwrap(), 1.0);
    assert!((ips_weight(IpsMode::ItemOnly, 0.5, p, 0.05).unwrap() - 5.0).abs() < 1e-12);
    assert!((ips_weight(IpsMode::UserOnly, 0.5, p, 0.05).unwrap() - 2.0).abs() < 1e-12);
    assert!((ips_weight(IpsMode::Dual, 0.25, p, 0.05).unwrap() - 2.75).abs() < 1e-12);
    assert!((ips_weight(IpsMode::FrequencyDual, 1.0, p, 0.05).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn unclipped_propensity_is_an_invariant_violation() {
    let low = Propensities {
        item_view: 0.01,
        user_view: 0.5,
    };
    let err = ips_weight(IpsMode::Dual, 0.5, low, 0.05).unwrap_err();
    assert!(matches!(err, Error::Invariant(_)));
    assert_eq!(err.exit_code(), 2);
    let high = Propensities {
        item_view: 0.5,
        user_view: 1.5,
    };
    assert!(matches!(
        ips_weight(IpsMode::UserOnly, 0.5, high, 0.05),
        Err(Error::Invariant(_))
    ));
    let nan = Propensities {
        item_view: f64::NAN,
        user_view: 0.5,
    };
    assert!(matches!(
        ips_weight(IpsMode::ItemOnly, 0.5, nan, 0.05),
        Err(Error::Invariant(_))
    ));
    // the item view is never consulted in user_only mode
    assert!(ips_weight(IpsMode::UserOnly, 0.5, low, 0.05).is_ok());
}

#[test]
fn weighted_loss_gradient_matches_finite_differences() {
    let mut model = tiny_model(4, 5, 5);
    let mut r = rng(9);
    let s: Vec<Sample> = (0..3)
        .map(|k| Sample {
            h_u: random_seq(&mut r, k + 1, 5),
            h_i: random_seq(&mut r, 2, 4),
            ..sample(k, k + 1, k != 1)
        })
        .collect();
    let p = vec![
        Propensities {
            item_view: 0.3,
            user_view: 0.1,
        },
        Propensities {
            item_view: 0.9,
            user_view: 0.5,
        },
        Propensities {
            item_view: 0.05,
            user_view: 0.7,
        },
    ];
    let refs: Vec<&Sample> = s.iter().collect();
    let mut tape = Tape::new();
    let v = unbiased_loss(&mut tape, &model, &refs, &p, IpsMode::Dual, 0.4, 0.05, None).unwrap();
    let grads = tape.backward(v).unwrap();
    let mut ids = model.store.group_ids(Group::Mlp);
    ids.extend(model.store.group_ids(Group::Embedding));
    let cs = coords(&model.store, &ids, 3, &mut r);
    let (emb, est, ie, ue, mlp, cfgm) = (
        model.emb,
        model.estimator.clone(),
        model.item_encoder.clone(),
        model.user_encoder.clone(),
        model.mlp,
        model.config,
    );
    let probes = run_probes(&mut model.store, &grads, &cs, |store| {
        let m = DepsModel {
            config: cfgm,
            store: store.clone(),
            emb,
            estimator: est.clone(),
            item_encoder: ie.clone(),
            user_encoder: ue.clone(),
            mlp,
            seed: 5,
        };
        loss_value(&m, &s, &p, IpsMode::Dual, 0.4, 0.05)
    });
    assert!(probes.len() >= 20);
    check_probes(&probes);
}

#[test]
fn no_stage1_epochs_change_nothing() {
    let d = data(1);
    let mut model = tiny_model(d.user_count, d.item_count, 1);
    let before: Vec<u64> = Group::ALL.iter().map(|&g| model.store.group_checksum(g)).collect();
    let recs = stage1_train(&mut model, &d, &LossConfig { n_p: 0, ..cfg() }).unwrap();
    assert!(recs.is_empty());
    let after: Vec<u64> = Group::ALL.iter().map(|&g| model.store.group_checksum(g)).collect();
    assert_eq!(before, after);
}

#[test]
fn stage1_lowers_sequence_losses_and_leaves_head_alone() {
    let d = data(2);
    let mut model = tiny_model(d.user_count, d.item_count, 2);
    let mlp = model.store.group_checksum(Group::Mlp);
    let recs = stage1_train(&mut model, &d, &LossConfig { n_p: 30, ..cfg() }).unwrap();
    assert_eq!(recs.len(), 30);
    let (first, last) = (&recs[0], &recs[29]);
    assert!(last.ar_item_view < first.ar_item_view, "{first:?} {last:?}");
    assert!(last.ar_user_view < first.ar_user_view, "{first:?} {last:?}");
    assert!(recs
        .iter()
        .all(|r| r.stage == 1 && r.mlm_item_view.is_some() && r.unbiased.is_none()));
    assert_eq!(model.store.group_checksum(Group::Mlp), mlp);
}

#[test]
fn no_stage2_epochs_change_nothing() {
    let d = data(3);
    let mut model = tiny_model(d.user_count, d.item_count, 3);
    let before: Vec<u64> = Group::ALL.iter().map(|&g| model.store.group_checksum(g)).collect();
    let recs = stage2_train(&mut model, &d, &LossConfig { n_u: 0, ..cfg() }, None).unwrap();
    assert!(recs.is_empty());
    let after: Vec<u64> = Group::ALL.iter().map(|&g| model.store.group_checksum(g)).collect();
    assert_eq!(before, after);
}

#[test]
fn propensity_update_count_is_np_plus_nu_times_nb() {
    let d = data(4);
    let c = LossConfig {
        n_p: 3,
        n_u: 2,
        n_b: 4,
        ..cfg()
    };
    let mut model = tiny_model(d.user_count, d.item_count, 4);
    let run = train(&mut model, &d, &c, None).unwrap();
    assert_eq!(run.records.len(), 5);
    for id in model.store.group_ids(Group::Propensity) {
        assert_eq!(model.store.param(id).adam_step_count(), 3 + 2 * 4);
    }
    let batches = d.samples.len().div_ceil(c.batch_size) as u64;
    for id in model.store.group_ids(Group::Mlp) {
        assert_eq!(model.store.param(id).adam_step_count(), 2 * batches);
    }
}

#[test]
fn stage2_updates_head_but_not_gru_through_preference_loss() {
    let d = data(5);
    let mut model = tiny_model(d.user_count, d.item_count, 5);
    let gru = model.store.group_checksum(Group::Propensity);
    let mlp = model.store.group_checksum(Group::Mlp);
    let mut c = cfg();
    c.n_u = 1;
    let props = compute_propensities(&model, &d, c.ips_mode, c.clip).unwrap();
    unbiased_epoch(&mut model, &d, &props, &c, 0).unwrap();
    assert_eq!(model.store.group_checksum(Group::Propensity), gru);
    assert_ne!(model.store.group_checksum(Group::Mlp), mlp);
}

#[test]
fn computed_propensities_are_clipped_and_mode_specific() {
    let d = data(6);
    let model = tiny_model(d.user_count, d.item_count, 6);
    let none = compute_propensities(&model, &d, IpsMode::None, 0.05).unwrap();
    assert!(none.iter().all(|p| *p == Propensities::ONE));
    for clip in [0.0, 0.05, 0.2] {
        let gru = compute_propensities(&model, &d, IpsMode::Dual, clip).unwrap();
        assert_eq!(gru.len(), d.samples.len());
        for (p, s) in gru.iter().zip(&d.samples) {
            assert!(p.item_view >= clip && p.item_view <= 1.0);
            assert!(p.user_view >= clip && p.user_view <= 1.0);
            let raw = model
                .estimator
                .distribution(&model.store, &model.emb, deps::embedding::Vocab::Items, &s.h_u)
                .unwrap()[s.item];
            assert_eq!(p.item_view, raw.max(clip));
        }
    }
    let freq = compute_propensities(&model, &d, IpsMode::FrequencyDual, 0.05).unwrap();
    let table = deps::propensity::FrequencyPropensity::from_index(&d.index).unwrap();
    for (p, s) in freq.iter().zip(&d.samples) {
        assert_eq!(p.item_view, table.p_item[s.item].max(0.05));
        assert_eq!(p.user_view, table.p_user[s.user].max(0.05));
    }
}

#[test]
fn identical_runs_give_identical_traces_and_checkpoints() {
    let d = data(7);
    let run = || {
        let mut model = DepsModel::new(
            ModelConfig {
                dropout: 0.1,
                ..tiny_config()
            },
            d.user_count,
            d.item_count,
            0.05,
            7,
        )
        .unwrap();
        let r = train(&mut model, &d, &cfg(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join(deps::recommender::CHECKPOINT_FILE)).unwrap();
        (r.to_jsonl().unwrap(), bytes)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn chunking_changes_only_rounding() {
    let d = data(8);
    let trace = |chunk: usize| {
        let mut model = tiny_model(d.user_count, d.item_count, 8);
        let r = train(
            &mut model,
            &d,
            &LossConfig {
                chunk_size: chunk,
                ..cfg()
            },
            None,
        )
        .unwrap();
        r.records
    };
    let (a, b) = (trace(1), trace(1000));
    for (x, y) in a.iter().zip(&b) {
        assert!((x.ar_item_view - y.ar_item_view).abs() < 1e-8 * x.ar_item_view.abs());
        let (u, v) = (x.unbiased.unwrap_or(0.0), y.unbiased.unwrap_or(0.0));
        assert!((u - v).abs() < 1e-6 * u.abs().max(1.0), "{u} {v}");
    }
}

#[test]
fn every_mode_trains() {
    let d = data(9);
    for mode in IpsMode::ALL {
        let mut model = tiny_model(d.user_count, d.item_count, 9);
        let c = LossConfig {
            ips_mode: mode,
            n_p: 1,
            n_u: 1,
            ..cfg()
        };
        let run = train(&mut model, &d, &c, None).unwrap();
        assert!(run.records.last().unwrap().unbiased.unwrap().is_finite());
    }
}

#[test]
fn non_finite_parameters_abort_training() {
    let d = data(10);
    let mut model = tiny_model(d.user_count, d.item_count, 10);
    let t = model.emb.items.table;
    model.store.value_mut(t).data_mut()[0] = f64::NAN;
    let err = train(&mut model, &d, &cfg(), None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn config_validation_names_the_key() {
    let bad = [
        (LossConfig { alpha: 1.5, ..cfg() }, "alpha"),
        (LossConfig { clip: 1.0, ..cfg() }, "clip"),
        (LossConfig { n_b: 0, ..cfg() }, "n_b"),
        (LossConfig { batch_size: 0, ..cfg() }, "batch_size"),
        (LossConfig { lr: -1.0, ..cfg() }, "lr"),
    ];
    for (c, key) in bad {
        match c.validate() {
            Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
            other => panic!("{key}: {other:?}"),
        }
    }
    assert!(matches!(IpsMode::parse("both"), Err(Error::Config { key, .. }) if key == "ips_mode"));
    for m in IpsMode::ALL {
        assert_eq!(IpsMode::parse(m.name()).unwrap(), m);
    }
    let json = r#"{"alpha": 0.3, "bogus": 1}"#;
    assert!(serde_json::from_str::<LossConfig>(json).is_err());
}

#[test]
fn trace_serialises_one_record_per_line() {
    let d = data(11);
    let mut model = tiny_model(d.user_count, d.item_count, 11);
    let run = train(&mut model, &d, &cfg(), None).unwrap();
    let text = run.to_jsonl().unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), run.records.len());
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["stage"], 1);
}
