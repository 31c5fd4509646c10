mod common;

use common::toy;
use skh_core::numerics::{grad_check, GradCheckOptions, Graph};
use skh_core::schema::Plan;
use skh_core::training::{
    loss_total, split, train, Checkpoint, LossWeights, MatchingMode, TrainConfig, TraceRecord,
};
use skh_core::Error;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: toy::config(8),
        epochs: 2,
        batch_size: 3,
        max_len: 12,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_total_gradients_match_finite_differences() {
    let (m, ex) = toy::two_entity();
    assert_eq!(ex.input.num_real(), 6);
    let gold = ex.gold_plan.clone().unwrap();
    assert_eq!(gold.len(), 6);
    let report = grad_check(
        |g, p| {
            let mut model = m.clone();
            model.params = p.clone();
            let (l, _) = loss_total(g, &model, &ex.input, &gold, LossWeights::default(), MatchingMode::Verbatim, true)?;
            Ok(l)
        },
        &m.params,
        1e-6,
        &GradCheckOptions { max_elems_per_param: Some(4), ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}

#[test]
fn dropout_loss_gradients_replay_masks() {
    let (mut m, ex) = toy::two_entity();
    m.config.dropout = 0.3;
    let gold = ex.gold_plan.clone().unwrap();
    let report = grad_check(
        |g, p| {
            let mut model = m.clone();
            model.params = p.clone();
            Ok(loss_total(g, &model, &ex.input, &gold, LossWeights::default(), MatchingMode::Indicator, true)?.0)
        },
        &m.params,
        1e-6,
        &GradCheckOptions { max_elems_per_param: Some(2), seed: 1, training: Some((5, 9)) },
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}

#[test]
fn loss_parts_combine_with_weights() {
    let (m, ex) = toy::two_entity();
    let gold = ex.gold_plan.clone().unwrap();
    let parts = |w| {
        let mut g = Graph::new();
        loss_total(&mut g, &m, &ex.input, &gold, w, MatchingMode::Verbatim, true).unwrap().1
    };
    let unit = parts(LossWeights { k: 1.0, e: 1.0, m: 1.0 });
    let w = parts(LossWeights { k: 1.0, e: 2.0, m: 3.0 });
    assert_eq!(unit.l_k, w.l_k);
    let want = w.l_k + 2.0 * w.l_e + 3.0 * w.l_m;
    assert!((w.total - want).abs() < 1e-12 * want.abs());
    assert!(unit.l_k > 0.0 && unit.l_e > 0.0 && unit.l_m >= 0.0);
}

#[test]
fn repeated_gold_triples_are_rejected_under_no_repeat() {
    let (m, ex) = toy::two_entity();
    let gold = ex.gold_plan.clone().unwrap();
    let t = gold.triples()[0];
    let dup = Plan::from_triples(&ex.input, &[t, t]);
    let mut g = Graph::new();
    let err = loss_total(&mut g, &m, &ex.input, &dup, LossWeights::default(), MatchingMode::Verbatim, true);
    assert!(matches!(err, Err(Error::TrainingSetup(_))));
    let mut g = Graph::new();
    assert!(loss_total(&mut g, &m, &ex.input, &dup, LossWeights::default(), MatchingMode::Verbatim, false).is_ok());
}

#[test]
fn training_is_deterministic() {
    let data = toy::corpus(21, 10, 3, 4);
    let (tr, va, _) = split(&data);
    let run = || {
        let out = train(tr, va, &tiny_config(), |_| {}).unwrap();
        (out.trace, out.best.to_bytes().unwrap(), out.last.params)
    };
    let (t1, c1, p1) = run();
    let (t2, c2, p2) = run();
    assert_eq!(serde_json::to_string(&t1).unwrap(), serde_json::to_string(&t2).unwrap());
    assert_eq!(c1, c2);
    assert_eq!(p1, p2);
    let batches = t1.iter().filter(|r| matches!(r, TraceRecord::Batch { .. })).count();
    assert_eq!(batches, 2 * 3);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let data = toy::corpus(22, 5, 2, 3);
    let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
    let out = train(&data, &[], &cfg, |_| {}).unwrap();
    let init = toy::model(cfg.model.clone(), &data, cfg.seed);
    assert_eq!(out.last.params, init.params);
}

#[test]
fn training_lowers_the_loss() {
    let data = toy::corpus(23, 12, 2, 3);
    let cfg = TrainConfig { epochs: 12, batch_size: 1, lr: 3e-3, ..tiny_config() };
    let out = train(&data, &[], &cfg, |_| {}).unwrap();
    let losses: Vec<f64> = out
        .trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Epoch { loss, .. } => Some(*loss),
            _ => None,
        })
        .collect();
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
}

#[test]
fn examples_without_gold_are_rejected() {
    let mut data = toy::corpus(24, 3, 2, 3);
    data[1].gold_plan = None;
    assert!(matches!(train(&data, &[], &tiny_config(), |_| {}), Err(Error::TrainingSetup(_))));
}

#[test]
fn split_is_80_10_10() {
    let data = toy::corpus(25, 200, 2, 3);
    let (a, b, c) = split(&data);
    assert_eq!((a.len(), b.len(), c.len()), (160, 20, 20));
    assert_eq!(c[0].id, data[180].id);
}

#[test]
fn checkpoint_round_trips_byte_identically() {
    let data = toy::corpus(26, 6, 2, 3);
    let cfg = TrainConfig { epochs: 1, ..tiny_config() };
    let out = train(&data, &data[..2], &cfg, |_| {}).unwrap();
    let bytes = out.best.to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.skh");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.best);
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    let model = loaded.to_model().unwrap();
    let again = Checkpoint { params: model.params.clone(), ..loaded.clone() };
    assert_eq!(again.to_bytes().unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_changed_shapes_and_corruption() {
    let data = toy::corpus(27, 4, 2, 3);
    let out = train(&data, &[], &TrainConfig { epochs: 1, ..tiny_config() }, |_| {}).unwrap();
    let mut wider = out.best.header.config.model.clone();
    wider.d_model = 16;
    wider.d_emb = 16;
    match out.best.to_model_with(&wider) {
        Err(Error::ParamShape { name, expected, found }) => {
            assert!(!name.is_empty());
            assert_ne!(expected, found);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
    let bytes = out.best.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}
