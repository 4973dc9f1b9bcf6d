//! Batch-level score distillation.
//!
//! For every example the candidate list is its positive, its mined negatives
//! and the positives of the other examples in the batch. Teacher scores for
//! the mined candidates come from the stored records; scores for in-batch
//! candidates are computed on the fly from the teachers' rewrite encodings.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::distill::loss::{flops_reg_loss, kld_loss, l1_reg_loss};
use crate::distill::teacher::{TeacherEnsemble, TrainingExample};
use crate::encoder::{EncoderGradients, EncoderModel, Forward};
use crate::error::{Error, Result};
use crate::sparse::SparseVec;

/// Frozen document representations addressable by external id.
#[derive(Debug, Clone, Default)]
pub struct DocStore {
    ids: Vec<String>,
    reps: Vec<SparseVec>,
    lookup: HashMap<String, usize>,
}

impl DocStore {
    pub fn new(docs: Vec<(String, SparseVec)>) -> Result<Self> {
        let mut store = Self::default();
        for (id, rep) in docs {
            if store.lookup.insert(id.clone(), store.ids.len()).is_some() {
                return Err(Error::DuplicateId(id));
            }
            store.ids.push(id);
            store.reps.push(rep);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<&SparseVec> {
        Ok(&self.reps[self.position(id)?])
    }

    pub fn rep(&self, pos: usize) -> &SparseVec {
        &self.reps[pos]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SparseVec)> {
        self.ids.iter().map(String::as_str).zip(&self.reps)
    }
}

/// Per-example teacher-side tensors computed once before training.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub teacher_reps: Vec<SparseVec>,
    /// `E_q(q_rw)` for the gold rewrite, when one is requested.
    pub gold_rep: Option<SparseVec>,
}

pub fn prepare_examples(
    ensemble: &TeacherEnsemble,
    examples: &[TrainingExample],
    gold: Option<(&EncoderModel, &str)>,
) -> Result<Vec<PreparedExample>> {
    examples
        .par_iter()
        .map(|ex| {
            let teacher_reps = ensemble.encode_rewrites(&ex.rewrites)?;
            let gold_rep = match gold {
                Some((model, source)) => {
                    let toks = ex
                        .rewrites
                        .get(source)
                        .filter(|t| !t.is_empty())
                        .ok_or_else(|| Error::MissingRewrite {
                            teacher: "gold".into(),
                            source_tag: source.to_string(),
                        })?;
                    Some(model.encode_query(toks)?)
                }
                None => None,
            };
            Ok(PreparedExample {
                teacher_reps,
                gold_rep,
            })
        })
        .collect()
}

/// Everything a batch loss needs besides the student.
pub struct BatchContext<'a> {
    pub ensemble: &'a TeacherEnsemble,
    pub docs: &'a DocStore,
    pub examples: &'a [TrainingExample],
    pub prepared: &'a [PreparedExample],
}

/// Candidate documents (as [`DocStore`] positions) with teacher scores;
/// the positive is always first.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub docs: Vec<usize>,
    pub teacher: Vec<f64>,
}

impl BatchContext<'_> {
    pub fn candidates(&self, batch: &[usize], item: usize) -> Result<CandidateSet> {
        let ex = &self.examples[batch[item]];
        ex.validate()?;
        let mut docs = Vec::with_capacity(1 + ex.negatives.len() + batch.len());
        let mut teacher = Vec::with_capacity(docs.capacity());
        docs.push(self.docs.position(&ex.positive)?);
        teacher.push(ex.positive_score);
        for (neg, score) in ex.negatives.iter().zip(&ex.negative_scores) {
            let pos = self.docs.position(neg)?;
            if !docs.contains(&pos) {
                docs.push(pos);
                teacher.push(*score);
            }
        }
        let prep = &self.prepared[batch[item]];
        for (j, &other) in batch.iter().enumerate() {
            if j == item {
                continue;
            }
            let pos = self.docs.position(&self.examples[other].positive)?;
            if docs.contains(&pos) {
                continue;
            }
            let (_, agg) = self
                .ensemble
                .score(&prep.teacher_reps, self.docs.rep(pos))?;
            docs.push(pos);
            teacher.push(agg);
        }
        Ok(CandidateSet { docs, teacher })
    }

    pub fn student_scores(&self, cands: &CandidateSet, fwd: &Forward) -> Result<Vec<f64>> {
        cands
            .docs
            .iter()
            .map(|&d| self.docs.rep(d).dot_dense(&fwd.activations))
            .collect()
    }

    /// Adds `scale · sum_c grad_c · doc_c` into a dense upstream buffer.
    pub fn scatter_score_grad(
        &self,
        cands: &CandidateSet,
        grad: &[f64],
        scale: f64,
        out: &mut [f64],
    ) {
        for (&d, g) in cands.docs.iter().zip(grad) {
            for &(t, w) in self.docs.rep(d).entries() {
                out[t as usize] += scale * g * w;
            }
        }
    }

    pub fn example_label(&self, idx: usize) -> String {
        let ex = &self.examples[idx];
        format!("{}#{}", ex.conversation_id, ex.turn)
    }

    /// L1 weight of the frozen documents touched by this batch.
    pub fn doc_regularizer(&self, sets: &[CandidateSet]) -> Result<f64> {
        let mut seen: Vec<usize> = sets.iter().flat_map(|c| c.docs.iter().copied()).collect();
        seen.sort_unstable();
        seen.dedup();
        let dense: Vec<Vec<f64>> = seen.iter().map(|&d| self.docs.rep(d).to_dense()).collect();
        let refs: Vec<&[f64]> = dense.iter().map(Vec::as_slice).collect();
        Ok(l1_reg_loss(&refs)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub temperature: f64,
}

/// Loss terms of one batch; `total = distill + λ_q·reg_q + λ_d·reg_d`.
#[derive(Debug, Clone, Default)]
pub struct StepLoss {
    pub total: f64,
    pub distill: f64,
    pub reg_q: f64,
    pub reg_d: f64,
    pub per_example: Vec<f64>,
    pub query_nnz: Vec<usize>,
}

pub(crate) fn forward_batch(
    student: &EncoderModel,
    ctx: &BatchContext<'_>,
    batch: &[usize],
) -> Result<Vec<Forward>> {
    batch
        .par_iter()
        .map(|&i| student.forward(&ctx.examples[i].query_tokens))
        .collect()
}

/// Adds the query-side FLOPS term to the loss and (optionally) to the
/// per-example upstream gradients.
pub(crate) fn apply_query_regularizer(
    fwds: &[Forward],
    lambda_q: f64,
    upstream: Option<&mut [Vec<f64>]>,
) -> Result<f64> {
    let refs: Vec<&[f64]> = fwds.iter().map(|f| f.activations.as_slice()).collect();
    let (reg, grads) = flops_reg_loss(&refs)?;
    if let Some(up) = upstream {
        if lambda_q != 0.0 {
            for (u, g) in up.iter_mut().zip(grads) {
                for (a, b) in u.iter_mut().zip(g) {
                    *a += lambda_q * b;
                }
            }
        }
    }
    Ok(reg)
}

/// Score-distillation loss over one batch:
/// `mean_i KL(S_teacher,i || S_student,i) + λ_q·FLOPS(queries) + λ_d·L1(docs)`.
///
/// The document term is constant with respect to the student. When `grads`
/// is given, the gradient of the total is accumulated into it.
pub fn disco_batch_loss(
    ctx: &BatchContext<'_>,
    batch: &[usize],
    student: &EncoderModel,
    weights: LossWeights,
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
    let mut upstream: Vec<Vec<f64>> = if want_grad {
        vec![vec![0.0; dim]; batch.len()]
    } else {
        Vec::new()
    };

    let mut per_example = Vec::with_capacity(batch.len());
    for (i, (fwd, cands)) in fwds.iter().zip(&sets).enumerate() {
        let student_scores = ctx.student_scores(cands, fwd)?;
        let (loss, g) =
            kld_loss(&cands.teacher, &student_scores, weights.temperature).map_err(|e| {
                Error::NonFinite(format!("example {}: {e}", ctx.example_label(batch[i])))
            })?;
        if want_grad {
            ctx.scatter_score_grad(cands, &g, 1.0 / b, &mut upstream[i]);
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
