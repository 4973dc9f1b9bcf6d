mod common;

use common::{rng, toy};
use disco::distill::{disco_batch_loss, LossWeights};
use disco::encoder::EncoderGradients;
use disco::trainer::{
    convdr_batch_loss, mean_rewrite_distance, train, Adam, Objective, TrainConfig,
};
use rand::Rng;

const NO_REG: LossWeights = LossWeights {
    lambda_q: 0.0,
    lambda_d: 0.0,
    temperature: 1.0,
};

#[test]
fn disco_loss_is_zero_when_context_equals_rewrite() {
    let mut t = toy(1, 40, 40, 30, 6, 5);
    for ex in &mut t.examples {
        ex.query_tokens = ex.rewrites["human"].clone();
    }
    let prepared = t.prepared(false);
    let ctx = t.ctx(&prepared);
    let student = t.teacher.trainable_copy();
    let batch: Vec<usize> = (0..6).collect();
    let loss = disco_batch_loss(&ctx, &batch, &student, NO_REG, None).unwrap();
    assert!(loss.total.abs() < 1e-12, "loss {}", loss.total);
}

#[test]
fn disco_loss_decreases_over_fifty_steps() {
    let t = toy(2, 30, 12, 25, 8, 4);
    let prepared = t.prepared(false);
    let ctx = t.ctx(&prepared);
    let mut student = t.teacher.trainable_copy();
    let mut r = rng(3);
    for p in student.params_mut().unwrap() {
        *p += r.gen_range(-0.2..0.2);
    }
    let batch: Vec<usize> = (0..8).collect();
    let weights = LossWeights {
        lambda_q: 1e-3,
        lambda_d: 5e-4,
        temperature: 1.0,
    };
    let mut adam = Adam::new(student.params().len(), 1e-3);
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let mut grads = EncoderGradients::zeros(*student.config());
        let loss = disco_batch_loss(&ctx, &batch, &student, weights, Some(&mut grads)).unwrap();
        assert!(loss.total < last, "step {step}: {} >= {last}", loss.total);
        last = loss.total;
        adam.step(&mut student, &grads).unwrap();
    }
}

#[test]
fn training_is_deterministic() {
    let t = toy(4, 30, 12, 25, 23, 4);
    let config = TrainConfig {
        epochs: 2,
        learning_rate: 1e-3,
        batch_size: 5,
        negatives: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let init = t.teacher.trainable_copy();
    let (a, ra) = train(&config, &t.examples, &init, &t.ensemble, &t.docs, None).unwrap();
    let (b, rb) = train(&config, &t.examples, &init, &t.ensemble, &t.docs, None).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.epochs, rb.epochs);
    assert_ne!(a.params(), init.params());
}

#[test]
fn convdr_terms_at_identity_with_uniform_scores() {
    let mut t = toy(5, 20, 20, 12, 1, 6);
    for ex in &mut t.examples {
        ex.query_tokens = ex.rewrites["human"].clone();
    }
    let same = common::random_sparse(&mut rng(6), 20, 5);
    let ids: Vec<String> = t.docs.iter().map(|(id, _)| id.to_string()).collect();
    t.docs = disco::distill::DocStore::new(ids.into_iter().map(|id| (id, same.clone())).collect())
        .unwrap();
    let prepared = t.prepared(true);
    let ctx = t.ctx(&prepared);
    let student = t.teacher.trainable_copy();
    let mse = convdr_batch_loss(&ctx, &[0], &student, NO_REG, 1.0, 0.0, None).unwrap();
    assert!(mse.total.abs() < 1e-15);
    let nce = convdr_batch_loss(&ctx, &[0], &student, NO_REG, 0.0, 1.0, None).unwrap();
    assert!((nce.total - 7f64.ln()).abs() < 1e-12, "{}", nce.total);
}

#[test]
fn convdr_pulls_a_perturbed_student_towards_the_rewrite() {
    let t = toy(7, 30, 30, 25, 20, 4);
    let mut init = t.teacher.trainable_copy();
    let mut r = rng(8);
    for p in init.params_mut().unwrap() {
        *p += r.gen_range(-0.3..0.3);
    }
    let config = TrainConfig {
        objective: Objective::ConvdrMse,
        epochs: 10,
        learning_rate: 3e-3,
        batch_size: 5,
        negatives: 4,
        infonce_weight: 0.0,
        lambda_q: 0.0,
        ..TrainConfig::default()
    };
    let mut examples = t.examples.clone();
    for ex in &mut examples {
        ex.query_tokens = ex.rewrites["human"].clone();
    }
    let before = mean_rewrite_distance(&init, &t.teacher, &examples, "human").unwrap();
    let (student, _) = train(&config, &examples, &init, &t.ensemble, &t.docs, None).unwrap();
    let after = mean_rewrite_distance(&student, &t.teacher, &examples, "human").unwrap();
    assert!(after < before, "distance {before} -> {after}");
}

#[test]
fn checkpoints_are_written_per_epoch() {
    let t = toy(10, 20, 8, 15, 6, 3);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 2,
        learning_rate: 1e-3,
        batch_size: 3,
        negatives: 3,
        ..TrainConfig::default()
    };
    let (student, report) = train(
        &config,
        &t.examples,
        &t.teacher.trainable_copy(),
        &t.ensemble,
        &t.docs,
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(report.final_checkpoint.as_deref(), Some("epoch-2.json"));
    let loaded = disco::encoder::EncoderModel::load(&dir.path().join("epoch-2.json")).unwrap();
    assert_eq!(loaded.params(), student.params());
    assert!(dir.path().join("epoch-1.json").is_file());
}
