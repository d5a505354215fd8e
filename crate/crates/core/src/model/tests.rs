use super::*;
use crate::numkit::gradcheck::compare_with_finite_differences;
use crate::numkit::rng::{seeded, standard_normal};
use crate::numkit::{OptimizerKind, OptimizerState};

fn tiny_config(class_no: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        encoder_hidden: vec![5, 4],
        decoder_hidden: vec![4, 5],
        latent_dim: 2,
        class_no,
    }
}

fn tiny_model(seed: u64) -> ClareModel {
    ClareModel::new(tiny_config(2), &mut seeded(seed)).unwrap()
}

fn batch(seed: u64, n: usize, dim: usize) -> Tensor {
    let mut rng = seeded(seed);
    let mut t = Tensor::zeros(&[n, dim]);
    for v in t.data_mut() {
        *v = rand::Rng::random_range(&mut rng, 0.05..0.95);
    }
    t
}

fn noise(seed: u64, n: usize, dz: usize) -> Tensor {
    standard_normal(&mut seeded(seed), &[n, dz])
}

#[test]
fn total_loss_matches_finite_differences() {
    let mut model = tiny_model(1);
    // Nonzero biases keep every ReLU input off its kink at exactly 0.
    let mut rng = seeded(101);
    for id in model.tape().ids().collect::<Vec<_>>() {
        if model.tape().name(id).ends_with(".bias") {
            let shape = model.tape().param(id).shape().to_vec();
            *model.tape_mut().param_mut(id) = standard_normal(&mut rng, &shape).map(|v| 0.3 * v);
        }
    }
    let x = batch(2, 4, 6);
    let labels = [0, 1, 1, 0];
    let eps = noise(3, 4, 2);
    for beta in [1.0, 0.3] {
        model.compute_gradients(&x, &labels, &eps, beta).unwrap();
        let report = compare_with_finite_differences(
            &mut model,
            |m| m.tape_mut(),
            |m| m.total_loss(&x, &labels, &eps, beta).map(|l| l.total),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert_eq!(report.checked, model.tape().num_values());
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }
}

#[test]
fn components_are_nonnegative_and_add_up() {
    let model = tiny_model(4);
    let x = batch(5, 3, 6);
    let l = model.total_loss(&x, &[1, 0, 1], &noise(6, 3, 2), 0.5).unwrap();
    assert!(l.classification >= 0.0 && l.reconstruction >= 0.0 && l.kl >= 0.0);
    assert!((l.total - (l.classification + l.reconstruction + 0.5 * l.kl)).abs() <= 1e-12);
}

/// The graph's logit-space reconstruction term equals the plain BCE on the
/// decoded probabilities.
#[test]
fn recorded_terms_match_reference_losses() {
    let model = tiny_model(7);
    let x = batch(8, 3, 6);
    let labels = [0, 1, 0];
    let eps = noise(9, 3, 2);
    let l = model.total_loss(&x, &labels, &eps, 1.0).unwrap();
    let q = model.encode(&x, &labels).unwrap();
    assert!((l.kl - kl_divergence(&q)).abs() <= 1e-12);
    let z = reparameterize(&q, &eps).unwrap();
    let x_hat = model.decode(&z, &labels).unwrap();
    assert!((l.reconstruction - reconstruction_loss(&x, &x_hat).unwrap()).abs() <= 1e-10);
    let probs = model.classify(&x).unwrap();
    assert!((l.classification - classification_loss(&probs, &labels).unwrap()).abs() <= 1e-12);
}

#[test]
fn dropping_classifier_term_leaves_decoder_gradients() {
    let mut model = tiny_model(10);
    let x = batch(11, 4, 6);
    let labels = [1, 1, 0, 1];
    let eps = noise(12, 4, 2);
    model.compute_gradients(&x, &labels, &eps, 1.0).unwrap();
    let full = model.tape().clone();

    let mut tape = model.tape().clone();
    tape.zero_grads();
    let mut g = Graph::new();
    let nodes = model.record_losses(&mut g, &x, &labels, &eps, 1.0).unwrap();
    let partial = g.weighted_sum(&[(nodes.reconstruction, 1.0), (nodes.kl, 1.0)]).unwrap();
    g.backward(partial, &mut tape).unwrap();

    let mut compared = 0;
    for id in tape.ids() {
        if tape.name(id).starts_with("decoder.") {
            assert!(tape.grad(id).bit_eq(full.grad(id)), "{}", tape.name(id));
            compared += 1;
        }
        if tape.name(id).starts_with("classifier.") {
            assert!(tape.grad(id).data().iter().all(|&v| v == 0.0));
        }
    }
    assert_eq!(compared, 7);
}

#[test]
fn one_step_on_a_singleton_decreases_loss() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut model = tiny_model(13);
        let x = batch(14, 1, 6);
        let eps = noise(15, 1, 2);
        let mut opt = OptimizerState::new(kind, 1e-3, model.tape()).unwrap();
        let before = model.train_step(&mut opt, &x, &[1], &eps, 1.0).unwrap().total;
        let after = model.total_loss(&x, &[1], &eps, 1.0).unwrap().total;
        assert!(after < before, "{kind:?}: {after} !< {before}");
    }
}

#[test]
fn seeded_training_is_bit_identical() {
    let run = || {
        let mut model = tiny_model(16);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 1e-2, model.tape()).unwrap();
        for step in 0..5 {
            let x = batch(100 + step, 3, 6);
            model
                .train_step(&mut opt, &x, &[0, 1, 1], &noise(200 + step, 3, 2), 1.0)
                .unwrap();
        }
        model
    };
    let (a, b) = (run(), run());
    for ((_, p), (_, q)) in a.tape().iter().zip(b.tape().iter()) {
        assert!(p.bit_eq(q));
    }
}

#[test]
fn encode_contracts() {
    let model = ClareModel::new(ModelConfig::mnist(16, 3), &mut seeded(17)).unwrap();
    let x = batch(18, 5, 784);
    let q = model.encode(&x, &[0, 1, 2, 0, 1]).unwrap();
    assert_eq!(q.mu.shape(), &[5, 16]);
    assert_eq!(q.log_var.shape(), &[5, 16]);
    assert!(q.mu.is_finite() && q.log_var.is_finite());
    assert_eq!(q, model.encode(&x, &[0, 1, 2, 0, 1]).unwrap());

    let q0 = model.encode(&Tensor::zeros(&[2, 784]), &[0, 2]).unwrap();
    assert!(q0.mu.is_finite());
    assert!(q0.log_var.data().iter().all(|v| v.abs() <= 10.0));

    assert!(matches!(
        model.encode(&x, &[0, 1, 3, 0, 1]),
        Err(ModelError::Condition { class: 3, class_no: 3 })
    ));
    assert!(matches!(
        model.encode(&x.map(|v| v + 1.0), &[0; 5]),
        Err(ModelError::InputRange { .. })
    ));
}

#[test]
fn log_var_is_clamped_in_graph_and_plain_paths() {
    let mut model = tiny_model(19);
    let id = model.tape().id("encoder.log_var.bias").unwrap();
    model.tape_mut().param_mut(id).data_mut().copy_from_slice(&[40.0, -40.0]);
    let q = model.encode(&batch(20, 2, 6), &[0, 1]).unwrap();
    for row in 0..2 {
        assert_eq!(q.log_var.row(row), &[10.0, -10.0]);
    }
}

#[test]
fn decode_stays_inside_open_unit_interval() {
    let model = tiny_model(21);
    let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1e3, -1e3], vec![-1e3, 1e3]]).unwrap();
    let x_hat = model.decode(&z, &[0, 1, 0]).unwrap();
    assert!(x_hat.data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(x_hat.bit_eq(&model.decode(&z, &[0, 1, 0]).unwrap()));
    assert!(model.decode(&z, &[0, 2, 0]).is_err());
    assert!(model.decode(&Tensor::zeros(&[3, 3]), &[0, 1, 0]).is_err());
}

#[test]
fn zero_classifier_gives_uniform_rows() {
    let mut model = ClareModel::new(ModelConfig::mnist(8, 4), &mut seeded(22)).unwrap();
    for name in ["classifier.weight", "classifier.bias"] {
        let id = model.tape().id(name).unwrap();
        model.tape_mut().param_mut(id).data_mut().fill(0.0);
    }
    let p = model.classify(&batch(23, 3, 784)).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.25));
}

#[test]
fn classify_rows_sum_to_one() {
    let model = ClareModel::new(ModelConfig::mnist(8, 10), &mut seeded(24)).unwrap();
    let p = model.classify(&batch(25, 7, 784)).unwrap();
    for i in 0..7 {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

fn old_columns(t: &Tensor, cols: usize) -> Vec<f64> {
    (0..t.rows()).flat_map(|i| t.row(i)[..cols].to_vec()).collect()
}

#[test]
fn expansion_preserves_old_logits_and_reconstructions() {
    let mut rng = seeded(26);
    let model = ClareModel::new(ModelConfig::mnist(8, 2), &mut rng).unwrap();
    let x = batch(27, 6, 784);
    let z = noise(28, 4, 8);
    let before_logits = model.logits(&x).unwrap();
    let before_recon = model.decode(&z, &[0, 1, 1, 0]).unwrap();

    let mut wide = model.expand_classes(3, &mut rng).unwrap();
    assert_eq!(wide.class_no(), 3);
    let id = wide.tape().id("classifier.weight").unwrap();
    wide.tape_mut().param_mut(id).row_mut(2).fill(0.0);
    let after = wide.logits(&x).unwrap();
    assert_eq!(old_columns(&after, 2), before_logits.data());
    assert!(wide.decode(&z, &[0, 1, 1, 0]).unwrap().bit_eq(&before_recon));

    // argmax over the old classes is unchanged
    for i in 0..6 {
        let a = before_logits.row(i);
        let b = &after.row(i)[..2];
        assert_eq!(a[0] >= a[1], b[0] >= b[1]);
    }
}

#[test]
fn expansion_composes() {
    let mut rng = seeded(29);
    let model = tiny_model(30);
    let twice = model.expand_classes(3, &mut rng).unwrap().expand_classes(5, &mut rng).unwrap();
    let once = model.expand_classes(5, &mut rng).unwrap();
    for (name, t) in model.tape().iter() {
        let (a, b) = (twice.tape().param(twice.tape().id(name).unwrap()), once.tape().param(once.tape().id(name).unwrap()));
        assert_eq!(a.shape(), b.shape(), "{name}");
        match name {
            "encoder.0.cond_weight" | "decoder.0.cond_weight" => {
                assert_eq!(old_columns(a, 2), t.data());
                assert_eq!(old_columns(b, 2), t.data());
            }
            "classifier.weight" | "classifier.bias" => {
                assert_eq!(&a.data()[..t.len()], t.data());
                assert_eq!(&b.data()[..t.len()], t.data());
            }
            _ => {
                assert!(a.bit_eq(t) && b.bit_eq(t), "{name}");
            }
        }
    }
    assert!(matches!(once.expand_classes(5, &mut rng), Err(ModelError::UnsupportedShrink { from: 5, to: 5 })));
    assert!(once.expand_classes(2, &mut rng).is_err());
}

#[test]
fn expanded_model_trains() {
    let mut rng = seeded(31);
    let mut model = tiny_model(32).expand_classes(3, &mut rng).unwrap();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, 1e-3, model.tape()).unwrap();
    let l = model.train_step(&mut opt, &batch(33, 3, 6), &[0, 1, 2], &noise(34, 3, 2), 1.0).unwrap();
    assert!(l.total.is_finite());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = tiny_model(35).expand_classes(4, &mut seeded(36)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.clre");
    model.save(&path).unwrap();
    let back = ClareModel::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for ((n1, p), (n2, q)) in model.tape().iter().zip(back.tape().iter()) {
        assert_eq!(n1, n2);
        assert!(p.bit_eq(q));
    }
    let mut ck = model.to_checkpoint();
    ck.class_no = 3;
    assert!(matches!(ClareModel::from_checkpoint(&ck), Err(ModelError::Config(_))));
}

#[test]
fn config_validation() {
    let mut c = tiny_config(2);
    c.latent_dim = MAX_LATENT_DIM + 1;
    assert!(ClareModel::new(c, &mut seeded(0)).is_err());
    let mut c = tiny_config(0);
    c.class_no = 0;
    assert!(ClareModel::new(c, &mut seeded(0)).is_err());
    assert!(ClareModel::new(ModelConfig::mnist(256, 10), &mut seeded(0)).is_ok());
}
