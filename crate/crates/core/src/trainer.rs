//! Optimization loop, baseline objectives and training reports.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::loss::{infonce_loss, kld_loss, mse_dense};
use crate::distill::objective::{
    apply_query_regularizer, disco_batch_loss, forward_batch, prepare_examples, BatchContext,
    DocStore, LossWeights, StepLoss,
};
use crate::distill::teacher::{TeacherEnsemble, TrainingExample};
use crate::encoder::{EncoderGradients, EncoderModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// KL divergence between teacher and student score distributions.
    DiscoKld,
    /// MSE to the gold-rewrite representation plus InfoNCE.
    ConvdrMse,
    InfonceOnly,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::DiscoKld => "disco_kld",
            Objective::ConvdrMse => "convdr_mse",
            Objective::InfonceOnly => "infonce_only",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disco_kld" => Ok(Self::DiscoKld),
            "convdr_mse" => Ok(Self::ConvdrMse),
            "infonce_only" => Ok(Self::InfonceOnly),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Weights of the two terms of the ConvDR-style baseline.
    pub mse_weight: f64,
    pub infonce_weight: f64,
    /// Rewrite source used as the representation target by `convdr_mse`.
    pub gold_source: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::DiscoKld,
            epochs: 5,
            learning_rate: 2e-5,
            batch_size: 10,
            negatives: 16,
            lambda_q: 1e-3,
            lambda_d: 5e-4,
            temperature: 1.0,
            seed: 0,
            mse_weight: 1.0,
            infonce_weight: 1.0,
            gold_source: "human".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.negatives == 0 {
            return bad("epochs, batch_size and negatives must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        for (name, v) in [
            ("lambda_q", self.lambda_q),
            ("lambda_d", self.lambda_d),
            ("mse_weight", self.mse_weight),
            ("infonce_weight", self.infonce_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_q: self.lambda_q,
            lambda_d: self.lambda_d,
            temperature: self.temperature,
        }
    }
}

/// Adam with β = (0.9, 0.999), ε = 1e-8. Coordinates whose gradient is
/// exactly zero are skipped: neither their moments nor their value change.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, model: &mut EncoderModel, grads: &EncoderGradients) -> Result<()> {
        let params = model.params_mut()?;
        let g = grads.values();
        if g.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match model".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Representation MSE to the gold rewrite plus InfoNCE on the positive, over
/// the same candidate lists as the distillation objective.
pub fn convdr_batch_loss(
    ctx: &BatchContext<'_>,
    batch: &[usize],
    student: &EncoderModel,
    weights: LossWeights,
    mse_weight: f64,
    infonce_weight: f64,
    grads: Option<&mut EncoderGradients>,
) -> Result<StepLoss> {
    contrastive_batch_loss(
        ctx,
        batch,
        student,
        weights,
        mse_weight,
        infonce_weight,
        grads,
    )
}

pub fn infonce_batch_loss(
    ctx: &BatchContext<'_>,
    batch: &[usize],
    student: &EncoderModel,
    weights: LossWeights,
    grads: Option<&mut EncoderGradients>,
) -> Result<StepLoss> {
    contrastive_batch_loss(ctx, batch, student, weights, 0.0, 1.0, grads)
}

fn contrastive_batch_loss(
    ctx: &BatchContext<'_>,
    batch: &[usize],
    student: &EncoderModel,
    weights: LossWeights,
    mse_weight: f64,
    infonce_weight: f64,
    grads: Option<&mut EncoderGradients>,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let fwds = forward_batch(student, ctx, batch)?;
    let sets = (0..batch.len())
        .map(|i| ctx.candidates(batch, i))
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len() as f64;
    let dim = student.vocab_size();
    let want_grad = grads.is_some();
    let mut upstream = if want_grad {
        vec![vec![0.0; dim]; batch.len()]
    } else {
        Vec::new()
    };
    let mut per_example = Vec::with_capacity(batch.len());
    for (i, (fwd, cands)) in fwds.iter().zip(&sets).enumerate() {
        let mut loss = 0.0;
        if mse_weight != 0.0 {
            let gold =
                ctx.prepared[batch[i]]
                    .gold_rep
                    .as_ref()
                    .ok_or_else(|| Error::MissingRewrite {
                        teacher: "gold".into(),
                        source_tag: ctx.example_label(batch[i]),
                    })?;
            let (l, g) = mse_dense(&fwd.activations, &gold.to_dense())?;
            loss += mse_weight * l;
            if want_grad {
                for (u, gi) in upstream[i].iter_mut().zip(g) {
                    *u += mse_weight * gi / b;
                }
            }
        }
        if infonce_weight != 0.0 {
            let scores = ctx.student_scores(cands, fwd)?;
            let (l, g) = infonce_loss(&scores, 0)?;
            loss += infonce_weight * l;
            if want_grad {
                ctx.scatter_score_grad(cands, &g, infonce_weight / b, &mut upstream[i]);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss for example {}",
                ctx.example_label(batch[i])
            )));
        }
        per_example.push(loss);
    }
    let distill = per_example.iter().sum::<f64>() / b;
    let reg_q = apply_query_regularizer(
        &fwds,
        weights.lambda_q,
        want_grad.then_some(upstream.as_mut_slice()),
    )?;
    let reg_d = ctx.doc_regularizer(&sets)?;
    if let Some(grads) = grads {
        for (fwd, up) in fwds.iter().zip(&upstream) {
            student.accumulate_backward(fwd, up, grads)?;
        }
    }
    Ok(StepLoss {
        total: distill + weights.lambda_q * reg_q + weights.lambda_d * reg_d,
        distill,
        reg_q,
        reg_d,
        per_example,
        query_nnz: fwds
            .iter()
            .map(|f| f.activations.iter().filter(|&&a| a > 0.0).count())
            .collect(),
    })
}

pub fn objective_batch_loss(
    config: &TrainConfig,
    ctx: &BatchContext<'_>,
    batch: &[usize],
    student: &EncoderModel,
    grads: Option<&mut EncoderGradients>,
) -> Result<StepLoss> {
    let w = config.loss_weights();
    match config.objective {
        Objective::DiscoKld => disco_batch_loss(ctx, batch, student, w, grads),
        Objective::ConvdrMse => convdr_batch_loss(
            ctx,
            batch,
            student,
            w,
            config.mse_weight,
            config.infonce_weight,
            grads,
        ),
        Objective::InfonceOnly => infonce_batch_loss(ctx, batch, student, w, grads),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_distill: f64,
    pub mean_reg_q: f64,
    pub mean_reg_d: f64,
    pub mean_query_nnz: f64,
    /// File name of the checkpoint written after this epoch.
    pub checkpoint: Option<String>,
}

/// Run-dependent values kept apart from the reproducible report body.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub epoch_wall_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub config: TrainConfig,
    pub examples: usize,
    pub epochs: Vec<EpochStats>,
    pub final_checkpoint: Option<String>,
    pub metadata: RunMetadata,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "epoch,mean_total,mean_distill,mean_reg_q,mean_reg_d,mean_query_nnz"
        )?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.epoch, e.mean_total, e.mean_distill, e.mean_reg_q, e.mean_reg_d, e.mean_query_nnz
            )?;
        }
        Ok(())
    }
}

/// Trains a student from `student_init`. When `checkpoint_dir` is set, a
/// checkpoint `epoch-<n>.json` is written there after every epoch.
pub fn train(
    config: &TrainConfig,
    examples: &[TrainingExample],
    student_init: &EncoderModel,
    ensemble: &TeacherEnsemble,
    docs: &DocStore,
    checkpoint_dir: Option<&Path>,
) -> Result<(EncoderModel, TrainReport)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Degenerate("no training examples".into()));
    }
    if student_init.is_frozen() {
        return Err(Error::Frozen);
    }
    if student_init.vocab_size() != ensemble.dim() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.dim(),
            actual: student_init.vocab_size(),
        });
    }
    for ex in examples {
        ex.validate()?;
    }
    let gold_model = ensemble.teachers()[0].model.clone();
    let gold = (config.objective == Objective::ConvdrMse && config.mse_weight != 0.0)
        .then_some((&gold_model, config.gold_source.as_str()));
    let prepared = prepare_examples(ensemble, examples, gold)?;
    let ctx = BatchContext {
        ensemble,
        docs,
        examples,
        prepared: &prepared,
    };

    let mut student = student_init.clone();
    let mut adam = Adam::new(student.params().len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        objective: config.objective,
        config: config.clone(),
        examples: examples.len(),
        epochs: Vec::new(),
        final_checkpoint: None,
        metadata: RunMetadata::default(),
    };

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_distill, mut sum_rq, mut sum_rd) = (0.0, 0.0, 0.0, 0.0);
        let mut nnz_total = 0usize;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = EncoderGradients::zeros(*student.config());
            let step = objective_batch_loss(config, &ctx, batch, &student, Some(&mut grads))?;
            if let Some(bad) = step.per_example.iter().position(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss for example {} in epoch {epoch}",
                    ctx.example_label(batch[bad])
                )));
            }
            if !step.total.is_finite() || !grads.is_finite() {
                let labels: Vec<String> = batch.iter().map(|&i| ctx.example_label(i)).collect();
                return Err(Error::NonFinite(format!(
                    "loss or gradient in epoch {epoch}, batch [{}]",
                    labels.join(", ")
                )));
            }
            adam.step(&mut student, &grads)?;
            sum_total += step.total * batch.len() as f64;
            sum_distill += step.per_example.iter().sum::<f64>();
            sum_rq += step.reg_q;
            sum_rd += step.reg_d;
            nnz_total += step.query_nnz.iter().sum::<usize>();
            batches += 1;
        }
        let n = examples.len() as f64;
        let checkpoint = match checkpoint_dir {
            Some(dir) => {
                let name = format!("epoch-{epoch}.json");
                std::fs::create_dir_all(dir)?;
                student.save(&dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} distill {:.5}",
            config.objective,
            sum_total / n,
            sum_distill / n
        );
        report.epochs.push(EpochStats {
            epoch,
            mean_total: sum_total / n,
            mean_distill: sum_distill / n,
            mean_reg_q: sum_rq / batches as f64,
            mean_reg_d: sum_rd / batches as f64,
            mean_query_nnz: nnz_total as f64 / n,
            checkpoint: checkpoint.clone(),
        });
        report.final_checkpoint = checkpoint;
        report
            .metadata
            .epoch_wall_seconds
            .push(started.elapsed().as_secs_f64());
    }
    Ok((student, report))
}

/// Mean per-example score-distribution KL of `student` against the teachers,
/// over consecutive batches of `batch_size` in example order.
pub fn mean_score_kld(
    student: &EncoderModel,
    examples: &[TrainingExample],
    ensemble: &TeacherEnsemble,
    docs: &DocStore,
    batch_size: usize,
    temperature: f64,
) -> Result<f64> {
    if examples.is_empty() || batch_size == 0 {
        return Err(Error::Degenerate(
            "need examples and a positive batch size".into(),
        ));
    }
    let prepared = prepare_examples(ensemble, examples, None)?;
    let ctx = BatchContext {
        ensemble,
        docs,
        examples,
        prepared: &prepared,
    };
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        for (i, &ex) in batch.iter().enumerate() {
            let cands = ctx.candidates(batch, i)?;
            let fwd = student.forward(&examples[ex].query_tokens)?;
            let s = ctx.student_scores(&cands, &fwd)?;
            total += kld_loss(&cands.teacher, &s, temperature)?.0;
        }
    }
    Ok(total / examples.len() as f64)
}

/// Mean Euclidean distance between the student's context encoding and the
/// reference encoder's gold-rewrite encoding.
pub fn mean_rewrite_distance(
    student: &EncoderModel,
    reference: &EncoderModel,
    examples: &[TrainingExample],
    gold_source: &str,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Degenerate("no examples".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let rw = ex
            .rewrites
            .get(gold_source)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::MissingRewrite {
                teacher: "gold".into(),
                source_tag: gold_source.to_string(),
            })?;
        let s = student.forward(&ex.query_tokens)?.activations;
        let t = reference.encode_query(rw)?.to_dense();
        total += s
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / examples.len() as f64)
}
