use super::*;
use crate::dataio::{make_toy_splits, toy_center, ToySpec};

fn toy(n_classes: usize) -> DataSplits {
    let spec = ToySpec {
        n_classes,
        n_per_class: 300,
        dim: 16,
        spread: 0.1,
        seed: 5,
    };
    make_toy_splits(&spec, 100).unwrap()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 32,
        lr: 2e-3,
        latent_dim: 4,
        encoder_hidden: vec![64, 32],
        decoder_hidden: vec![32, 64],
        ..TrainConfig::default()
    }
}

fn class_acc(record: &MetricsRecord, class: u32) -> f64 {
    record.per_class.iter().find(|c| c.class == class).unwrap().accuracy
}

fn strip_time(mut records: Vec<MetricsRecord>) -> Vec<MetricsRecord> {
    for r in &mut records {
        r.wall_clock_secs = 0.0;
    }
    records
}

#[test]
fn replay_prevents_forgetting_and_fine_tuning_forgets() {
    let data = toy(2);
    let schedule = build_schedule(&[0, 1], 1).unwrap();
    let with = run_experiment(&data, &schedule, &toy_config(), 3).unwrap();
    assert_eq!(with.len(), 2);
    assert_eq!(with[0].overall_accuracy, 100.0);
    assert_eq!(with[1].replay_samples, 300);
    assert!(class_acc(&with[1], 0) >= 90.0, "{:?}", with[1].per_class);

    let without = run_finetune_baseline(&data, &schedule, &toy_config(), 3).unwrap();
    assert_eq!(without[1].replay_samples, 0);
    assert!(class_acc(&without[1], 0) < 20.0, "{:?}", without[1].per_class);
}

#[test]
fn joint_toy_run_is_accurate_and_equals_single_group() {
    let data = toy(4);
    let joint = run_joint_baseline(&data, &toy_config(), 8).unwrap();
    assert!(joint.overall_accuracy >= 98.0, "{joint:?}");
    assert_eq!(joint.classes_seen, vec![0, 1, 2, 3]);

    let schedule = build_schedule(&[0, 1, 2, 3], 4).unwrap();
    let single = run_experiment(&data, &schedule, &toy_config(), 8).unwrap();
    assert_eq!(strip_time(single), strip_time(vec![joint.clone()]));
    let fine = run_finetune_baseline(&data, &schedule, &toy_config(), 8).unwrap();
    assert_eq!(strip_time(fine), strip_time(vec![joint]));
}

#[test]
fn trained_decoder_reproduces_class_centroids() {
    let data = toy(2);
    let schedule = build_schedule(&[0, 1], 2).unwrap();
    let state = run_experiment_state(&data, &schedule, &toy_config(), 4, &mut |_, _| Ok(())).unwrap();
    let model = state.model().unwrap();
    let snapshot = state.snapshot().unwrap();
    let bound = 0.15 * 16f64.sqrt();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    for class in 0..2u32 {
        let centroid = data.train.centroid(class).unwrap();
        let idx = state.class_map().index_of(class).unwrap();
        let at_zero = model.decode(&Tensor::zeros(&[1, 4]), &[idx]).unwrap();
        assert!(dist(at_zero.row(0), &centroid) <= bound);

        let buf = generate_replay(snapshot, &BTreeMap::from([(idx, 500)]), 21).unwrap();
        let mut mean = vec![0.0; 16];
        for i in 0..buf.len() {
            for (m, v) in mean.iter_mut().zip(buf.images.row(i)) {
                *m += v / 500.0;
            }
        }
        assert!(dist(&mean, &centroid) <= bound, "{class}: {mean:?}");
        // the centroid itself sits near the generating corner
        assert!(dist(&centroid, &toy_center(class as usize, 2, 16)) <= bound);
    }
    assert!(evaluate(model, &data.test, state.learned()).unwrap().overall >= 95.0);
}

#[test]
fn runs_are_deterministic() {
    let data = toy(3);
    let schedule = build_schedule(&[0, 1, 2], 1).unwrap();
    let config = TrainConfig {
        epochs: 3,
        ..toy_config()
    };
    let a = strip_time(run_experiment(&data, &schedule, &config, 11).unwrap());
    let b = strip_time(run_experiment(&data, &schedule, &config, 11).unwrap());
    assert_eq!(a, b);
    let c = strip_time(run_experiment(&data, &schedule, &config, 12).unwrap());
    assert_ne!(a, c);
}

#[test]
fn increments_track_seen_classes() {
    let data = toy(3);
    let schedule = build_schedule(&[0, 1, 2], 1).unwrap();
    let config = TrainConfig {
        epochs: 1,
        ..toy_config()
    };
    let mut seen_replays = Vec::new();
    let state = run_experiment_state(&data, &schedule, &config, 2, &mut |i, buf| {
        seen_replays.push((i, buf.class_counts()));
        Ok(())
    })
    .unwrap();
    assert_eq!(
        seen_replays,
        vec![(1, BTreeMap::from([(0, 300)])), (2, BTreeMap::from([(0, 300), (1, 300)]))]
    );
    assert_eq!(state.model().unwrap().class_no(), 3);
    for (i, r) in state.history().iter().enumerate() {
        assert_eq!(r.increment, i);
        assert_eq!(r.classes_seen, (0..=i as u32).collect::<Vec<_>>());
        assert_eq!(r.per_class.len(), i + 1);
        assert_eq!(r.train_samples, 300 * (i + 1));
        assert!((0.0..=100.0).contains(&r.overall_accuracy));
        assert_eq!(r.epochs.len(), 1);
    }
    assert_eq!(state.snapshot().unwrap().increment(), 2);
}

#[test]
fn warm_start_widens_the_previous_model() {
    let data = toy(2);
    let config = TrainConfig {
        epochs: 1,
        start: StartMode::Warm,
        ..toy_config()
    };
    let schedule = build_schedule(&[0, 1], 1).unwrap();
    let state = run_experiment_state(&data, &schedule, &config, 1, &mut |_, _| Ok(())).unwrap();
    let model = state.model().unwrap();
    assert_eq!(model.class_no(), 2);
    assert!(model.steps() > 10);
}

#[test]
fn increment_errors() {
    let data = toy(2);
    let config = TrainConfig {
        epochs: 1,
        ..toy_config()
    };
    let first = data.train.subset_by_classes(&[0]).unwrap();
    let state = run_increment(IncrementState::new(), &first, &data.test, &config, 0).unwrap();
    assert!(matches!(
        run_increment(state.clone(), &first, &data.test, &config, 1),
        Err(ProtocolError::Overlap(0))
    ));
    let empty = LabeledDataset::empty(16);
    assert!(matches!(
        run_increment(state, &empty, &data.test, &config, 1),
        Err(ProtocolError::EmptyGroup)
    ));

    let partial = build_schedule(&[0], 1).unwrap();
    assert!(matches!(run_experiment(&data, &partial, &config, 0), Err(ProtocolError::Schedule(_))));
    let bad = TrainConfig { lr: 0.0, ..config };
    assert!(matches!(
        run_experiment(&data, &build_schedule(&[0, 1], 1).unwrap(), &bad, 0),
        Err(ProtocolError::Config(_))
    ));
}

#[test]
fn missing_test_class_is_reported() {
    let data = toy(2);
    let test = data.test.subset_by_classes(&[1]).unwrap();
    let config = TrainConfig {
        epochs: 1,
        ..toy_config()
    };
    let first = data.train.subset_by_classes(&[0]).unwrap();
    assert!(matches!(
        run_increment(IncrementState::new(), &first, &test, &config, 0),
        Err(ProtocolError::MissingTestClass(0))
    ));
}
