mod common;

use burnmap::engine::{Checkpoint, Trainer};
use burnmap::lora::LoraTarget;
use burnmap::*;
use common::*;
use diffcore::Rng;

fn patches(seed: u64, n: usize) -> Vec<Patch> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| random_patch(&mut rng, &format!("f{i:03}"), 16))
        .collect()
}

fn cfg(strategy: Strategy, lr: f64, steps: usize) -> TrainConfig {
    TrainConfig {
        lr,
        strategy,
        max_steps: Some(steps),
        eval_every: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn model(strategy: Strategy) -> Model<f32> {
    Model::build(&micro_config(16, 2), strategy, &LoraSpec::default(), 5).unwrap()
}

#[test]
fn zero_learning_rate_leaves_every_weight_alone() {
    let data = patches(1, 6);
    for s in Strategy::ALL {
        let m = model(s);
        let before = m.params.clone();
        let out = engine::train(m, &data[..4], &data[4..], &cfg(s, 0.0, 4), |_| Ok(())).unwrap();
        for (a, b) in before.iter().zip(&out.last.params) {
            assert_eq!(a.tensor, b.tensor, "{} moved under {s}", a.name);
        }
    }
}

#[test]
fn frozen_encoder_checksum_survives_training() {
    let data = patches(2, 6);
    for s in [Strategy::DecoderOnly, Strategy::Lora] {
        let m = model(s);
        let enc = m.encoder_checksum();
        let classifier = m.param("decoder.classifier.weight").unwrap().tensor.clone();
        let out = engine::train(m, &data[..4], &data[4..], &cfg(s, 1e-2, 6), |_| Ok(())).unwrap();
        let trained = out.last.to_model().unwrap();
        assert_eq!(trained.encoder_checksum(), enc, "{s}");
        assert_ne!(
            trained.param("decoder.classifier.weight").unwrap().tensor,
            classifier
        );
    }
    let m = model(Strategy::FullFt);
    let enc = m.encoder_checksum();
    let out = engine::train(m, &data[..4], &[], &cfg(Strategy::FullFt, 1e-2, 3), |_| {
        Ok(())
    })
    .unwrap();
    assert_ne!(out.last.to_model().unwrap().encoder_checksum(), enc);
}

#[test]
fn lora_training_moves_only_adapters_inside_the_encoder() {
    let data = patches(3, 4);
    let m = model(Strategy::Lora);
    let before = m.params.clone();
    let out = engine::train(m, &data, &[], &cfg(Strategy::Lora, 1e-2, 4), |_| Ok(())).unwrap();
    let moved: Vec<&str> = before
        .iter()
        .zip(&out.last.params)
        .filter(|(a, b)| a.tensor != b.tensor)
        .map(|(a, _)| a.name.as_str())
        .collect();
    assert!(moved.iter().any(|n| n.ends_with(".lora_b")));
    assert!(moved
        .iter()
        .all(|n| !n.starts_with("encoder.") || n.contains(".lora_")));
}

#[test]
fn trainable_sets_nest_strictly() {
    let c = micro_config(16, 2);
    let l = LoraSpec::default();
    let names = |s| ModelAssembly::build(&c, s, &l).unwrap().trainable_names();
    let (d, lo, f) = (
        names(Strategy::DecoderOnly),
        names(Strategy::Lora),
        names(Strategy::FullFt),
    );
    assert!(d.is_subset(&lo) && d.len() < lo.len());
    // Full fine-tuning has no adapters; compare on a common parameter set.
    let mut full = ModelAssembly::build_with_adapters(&c, Strategy::FullFt, Some(&l)).unwrap();
    assert!(lo.is_subset(&full.trainable_names()) && lo.len() < full.trainable_names().len());
    full.set_strategy(Strategy::DecoderOnly).unwrap();
    assert_eq!(full.trainable_names(), d);
    assert!(d.is_subset(&f) && d.len() < f.len());
}

#[test]
fn same_seed_same_history() {
    let data = patches(4, 6);
    let run = || {
        engine::train(
            model(Strategy::Lora),
            &data[..4],
            &data[4..],
            &cfg(Strategy::Lora, 1e-3, 5),
            |_| Ok(()),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.last.to_bytes(), b.last.to_bytes());
    assert_eq!(a.history.len(), 5);
    assert!(a.history[1].val_iou.is_some() && a.history[0].val_iou.is_none());
    assert!(a.history[4].val_iou.is_some());
}

#[test]
fn batches_cover_each_epoch_once() {
    let data = patches(5, 7);
    let t = Trainer::new(
        model(Strategy::DecoderOnly),
        &data,
        &[],
        cfg(Strategy::DecoderOnly, 1e-3, 8),
    )
    .unwrap();
    assert_eq!(t.steps_per_epoch(), 4);
    for epoch in 0..2u64 {
        let mut seen: Vec<usize> = (0..4)
            .flat_map(|s| t.batch_indices(epoch * 4 + s))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
    assert_ne!(t.batch_indices(0), t.batch_indices(4));
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = patches(6, 4);
    let spec = LoraSpec {
        rank: 2,
        targets: vec![LoraTarget::Qkv, LoraTarget::Fc2],
        ..LoraSpec::default()
    };
    let m = Model::<f32>::build(&micro_config(16, 2), Strategy::Lora, &spec, 9).unwrap();
    let mut t = Trainer::new(m, &data, &[], cfg(Strategy::Lora, 1e-2, 3)).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    let ck = t.checkpoint();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path, Some(&ck.config_hash), false).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let restored = back.to_model().unwrap();
    let p = &data[0];
    assert_eq!(
        restored.predict_logits(&p.pre, &p.post).unwrap(),
        t.model.predict_logits(&p.pre, &p.post).unwrap()
    );
}

#[test]
fn mismatched_hash_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(Strategy::DecoderOnly);
    let ck = Checkpoint::capture(&m, &diffcore::AdamState::new(&m.params), 0, None);
    let path = dir.path().join("b.ckpt");
    ck.save(&path).unwrap();
    let err = Checkpoint::<f32>::load(&path, Some("deadbeef"), false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(Checkpoint::<f32>::load(&path, Some("deadbeef"), true).is_ok());
}

#[test]
fn corrupted_checkpoint_rejected() {
    let m = model(Strategy::Lora);
    let bytes = Checkpoint::capture(&m, &diffcore::AdamState::new(&m.params), 0, None).to_bytes();
    assert!(Checkpoint::<f32>::from_bytes(&bytes).is_ok());
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(Checkpoint::<f32>::from_bytes(&flipped).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 7]).is_err());
    // Precision is part of the format.
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let data = patches(7, 5);
    let c = cfg(Strategy::Lora, 1e-2, 4);
    let mut straight = Trainer::new(model(Strategy::Lora), &data, &[], c.clone()).unwrap();
    for _ in 0..4 {
        straight.train_step().unwrap();
    }
    let mut first = Trainer::new(model(Strategy::Lora), &data, &[], c.clone()).unwrap();
    first.train_step().unwrap();
    first.train_step().unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut second = Trainer::resume(&ck, &data, &[], c).unwrap();
    assert_eq!(second.step, 2);
    second.train_step().unwrap();
    second.train_step().unwrap();
    assert_eq!(second.model.params, straight.model.params);
    assert_eq!(second.adam, straight.adam);
}

#[test]
fn non_finite_input_aborts_with_fire_ids() {
    let mut data = patches(8, 2);
    data[0].fire_id = "poisoned".into();
    data[1].fire_id = "poisoned_too".into();
    data[0].pre.data_mut()[5] = f32::NAN;
    let c = TrainConfig {
        batch_size: 2,
        ..cfg(Strategy::DecoderOnly, 1e-3, 1)
    };
    let err = engine::train(model(Strategy::DecoderOnly), &data, &[], &c, |_| Ok(()))
        .err()
        .expect("training must stop");
    let msg = err.to_string();
    assert!(matches!(err, Error::Training(_)), "{msg}");
    assert!(msg.contains("poisoned"), "{msg}");
}

#[test]
fn patience_stops_early() {
    let data = patches(9, 6);
    let c = TrainConfig {
        patience: Some(1),
        eval_every: 1,
        ..cfg(Strategy::DecoderOnly, 0.0, 50)
    };
    let out = engine::train(
        model(Strategy::DecoderOnly),
        &data[..4],
        &data[4..],
        &c,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best.step, 1);
    assert_eq!(out.last.step, 2);
}

#[test]
fn history_log_is_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let mut log = engine::HistoryLog::open(&path).unwrap();
    let data = patches(10, 5);
    engine::train(
        model(Strategy::DecoderOnly),
        &data[..4],
        &data[4..],
        &cfg(Strategy::DecoderOnly, 1e-3, 3),
        |e| log.append(e),
    )
    .unwrap();
    drop(log);
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<engine::HistoryEntry> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
}

#[test]
fn holdout_is_by_fire() {
    let data = patches(11, 40);
    let mut twice = data.clone();
    twice.extend(data.iter().cloned().map(|mut p| {
        p.origin = (1, 1);
        p
    }));
    let (train, val) = engine::holdout_split(twice, 0.2);
    assert!(!val.is_empty() && !train.is_empty());
    for v in &val {
        assert!(train.iter().all(|t| t.fire_id != v.fire_id));
    }
}

#[test]
fn target_iou_stops_at_first_eval_that_reaches_it() {
    let data = patches(12, 6);
    let c = TrainConfig {
        target_val_iou: Some(0.0),
        ..cfg(Strategy::DecoderOnly, 1e-3, 50)
    };
    let out = engine::train(
        model(Strategy::DecoderOnly),
        &data[..4],
        &data[4..],
        &c,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best.step, 2);
}
