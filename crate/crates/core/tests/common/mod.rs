//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use disco::distill::{
    prepare_examples, teacher_scores, Aggregation, BatchContext, DocStore, PreparedExample,
    Teacher, TeacherEnsemble, TrainingExample,
};
use disco::encoder::{EncoderConfig, EncoderGradients, EncoderModel};
use disco::SparseVec;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_sparse(rng: &mut ChaCha8Rng, dim: usize, nnz: usize) -> SparseVec {
    let mut idx = sample(rng, dim, nnz.min(dim)).into_vec();
    idx.sort_unstable();
    let entries = idx
        .into_iter()
        .map(|i| (i as u32, rng.gen_range(0.1..2.0)))
        .collect();
    SparseVec::new(dim, entries).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Small random world: a frozen random teacher, random documents and
/// examples whose teacher scores come from the teacher itself.
pub struct Toy {
    pub teacher: EncoderModel,
    pub ensemble: TeacherEnsemble,
    pub docs: DocStore,
    pub examples: Vec<TrainingExample>,
}

pub fn toy(
    seed: u64,
    vocab: usize,
    hidden: usize,
    n_docs: usize,
    n_examples: usize,
    negatives: usize,
) -> Toy {
    let mut r = rng(seed);
    let teacher = EncoderModel::random(EncoderConfig::new(vocab, hidden), &mut r)
        .unwrap()
        .freeze();
    let ensemble = TeacherEnsemble::single(teacher.clone(), "human").unwrap();
    let doc_list: Vec<(String, SparseVec)> = (0..n_docs)
        .map(|d| (format!("d{d:03}"), random_sparse(&mut r, vocab, vocab / 4)))
        .collect();
    let docs = DocStore::new(doc_list.clone()).unwrap();
    let mut examples = Vec::new();
    for e in 0..n_examples {
        let rewrite = random_tokens(&mut r, vocab, 4);
        let query_tokens = random_tokens(&mut r, vocab, 10);
        let picks = sample(&mut r, n_docs, negatives + 1).into_vec();
        let rewrites = BTreeMap::from([("human".to_string(), rewrite)]);
        let cands: Vec<(&str, &SparseVec)> = picks
            .iter()
            .map(|&i| (doc_list[i].0.as_str(), &doc_list[i].1))
            .collect();
        let records = teacher_scores(&ensemble, &format!("c{e}"), 0, &rewrites, &cands).unwrap();
        examples.push(TrainingExample {
            conversation_id: format!("c{e}"),
            turn: 0,
            query_tokens,
            rewrites,
            positive: records[0].doc_id.clone(),
            negatives: records[1..].iter().map(|r| r.doc_id.clone()).collect(),
            positive_score: records[0].aggregate,
            negative_scores: records[1..].iter().map(|r| r.aggregate).collect(),
            filled: false,
        });
    }
    Toy {
        teacher,
        ensemble,
        docs,
        examples,
    }
}

impl Toy {
    pub fn prepared(&self, with_gold: bool) -> Vec<PreparedExample> {
        let gold = with_gold.then_some((&self.teacher, "human"));
        prepare_examples(&self.ensemble, &self.examples, gold).unwrap()
    }

    pub fn ctx<'a>(&'a self, prepared: &'a [PreparedExample]) -> BatchContext<'a> {
        BatchContext {
            ensemble: &self.ensemble,
            docs: &self.docs,
            examples: &self.examples,
            prepared,
        }
    }
}

/// `n` identical copies of a teacher under different names.
pub fn identical_ensemble(model: &EncoderModel, n: usize) -> TeacherEnsemble {
    let teachers = (0..n)
        .map(|i| Teacher {
            name: format!("t{i}"),
            model: model.clone(),
            source: "human".into(),
        })
        .collect();
    TeacherEnsemble::new(teachers, Aggregation::Mean).unwrap()
}

/// Largest relative error between analytic and central-difference
/// gradients over `count` parameters drawn from those with a non-zero
/// analytic gradient.
pub fn finite_difference_error<F>(
    model: &EncoderModel,
    grads: &EncoderGradients,
    loss: F,
    count: usize,
    eps: f64,
    seed: u64,
) -> (f64, usize)
where
    F: Fn(&EncoderModel) -> f64,
{
    let live: Vec<usize> = grads
        .values()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.abs() > 1e-8)
        .map(|(i, _)| i)
        .collect();
    assert!(
        live.len() >= count,
        "only {} parameters carry gradient",
        live.len()
    );
    let mut r = rng(seed);
    let picks = sample(&mut r, live.len(), count).into_vec();
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for p in picks {
        let i = live[p];
        let orig = probe.params()[i];
        probe.params_mut().unwrap()[i] = orig + eps;
        let up = loss(&probe);
        probe.params_mut().unwrap()[i] = orig - eps;
        let down = loss(&probe);
        probe.params_mut().unwrap()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.values()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
    }
    (worst, count)
}
