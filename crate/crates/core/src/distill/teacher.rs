//! Teacher inference: rewrite scoring, multi-teacher aggregation and
//! hard-negative mining.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::sparse::SparseVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
    Max,
}

impl Aggregation {
    /// Incremental mean, so identical inputs aggregate to exactly that value.
    pub fn apply(self, scores: &[f64]) -> Result<f64> {
        if scores.is_empty() {
            return Err(Error::Degenerate("no teacher scores to aggregate".into()));
        }
        Ok(match self {
            Aggregation::Mean => {
                let mut mean = 0.0;
                for (i, s) in scores.iter().enumerate() {
                    mean += (s - mean) / (i + 1) as f64;
                }
                mean
            }
            Aggregation::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            other => Err(Error::InvalidConfig(format!(
                "unknown aggregation {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub name: String,
    pub model: EncoderModel,
    /// Rewrite source this teacher reads, e.g. `"human"`.
    pub source: String,
}

/// Frozen teachers, kept sorted by name so that aggregation order is fixed.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    teachers: Vec<Teacher>,
    aggregation: Aggregation,
}

impl TeacherEnsemble {
    pub fn new(mut teachers: Vec<Teacher>, aggregation: Aggregation) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::InvalidConfig(
                "teacher ensemble needs at least one teacher".into(),
            ));
        }
        teachers.sort_by(|a, b| a.name.cmp(&b.name));
        for w in teachers.windows(2) {
            if w[0].name == w[1].name {
                return Err(Error::DuplicateId(w[0].name.clone()));
            }
        }
        let dim = teachers[0].model.vocab_size();
        for t in &mut teachers {
            if t.model.vocab_size() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: t.model.vocab_size(),
                });
            }
            if !t.model.is_frozen() {
                t.model = t.model.clone().freeze();
            }
        }
        Ok(Self {
            teachers,
            aggregation,
        })
    }

    /// One teacher named after its rewrite source.
    pub fn single(model: EncoderModel, source: &str) -> Result<Self> {
        Self::new(
            vec![Teacher {
                name: source.to_string(),
                model,
                source: source.to_string(),
            }],
            Aggregation::Mean,
        )
    }

    pub fn teachers(&self) -> &[Teacher] {
        &self.teachers
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn dim(&self) -> usize {
        self.teachers[0].model.vocab_size()
    }

    /// Encodes each teacher's rewrite, in ensemble order.
    pub fn encode_rewrites(&self, rewrites: &BTreeMap<String, Vec<u32>>) -> Result<Vec<SparseVec>> {
        self.teachers
            .iter()
            .map(|t| {
                let tokens = rewrites
                    .get(&t.source)
                    .filter(|r| !r.is_empty())
                    .ok_or_else(|| Error::MissingRewrite {
                        teacher: t.name.clone(),
                        source_tag: t.source.clone(),
                    })?;
                t.model.encode_query(tokens)
            })
            .collect()
    }

    /// Per-teacher scores and their aggregate for one document.
    pub fn score(&self, reps: &[SparseVec], doc: &SparseVec) -> Result<(Vec<f64>, f64)> {
        if reps.len() != self.teachers.len() {
            return Err(Error::Shape(format!(
                "{} teacher representations for {} teachers",
                reps.len(),
                self.teachers.len()
            )));
        }
        let scores = reps
            .iter()
            .map(|r| r.dot(doc))
            .collect::<Result<Vec<_>>>()?;
        let agg = self.aggregation.apply(&scores)?;
        Ok((scores, agg))
    }
}

/// Teacher scores for one `(conversation, turn, document)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub conversation_id: String,
    pub turn: usize,
    pub doc_id: String,
    pub teacher_scores: BTreeMap<String, f64>,
    pub aggregate: f64,
}

/// Scores every candidate with every teacher's rewrite.
pub fn teacher_scores(
    ensemble: &TeacherEnsemble,
    conversation_id: &str,
    turn: usize,
    rewrites: &BTreeMap<String, Vec<u32>>,
    candidates: &[(&str, &SparseVec)],
) -> Result<Vec<ScoreRecord>> {
    let reps = ensemble.encode_rewrites(rewrites)?;
    candidates
        .iter()
        .map(|(doc_id, doc)| {
            let (scores, aggregate) = ensemble.score(&reps, doc)?;
            Ok(ScoreRecord {
                conversation_id: conversation_id.to_string(),
                turn,
                doc_id: doc_id.to_string(),
                teacher_scores: ensemble
                    .teachers
                    .iter()
                    .map(|t| t.name.clone())
                    .zip(scores)
                    .collect(),
                aggregate,
            })
        })
        .collect()
}

/// One distillation training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub conversation_id: String,
    pub turn: usize,
    /// Flattened conversation context fed to the student.
    pub query_tokens: Vec<u32>,
    /// Rewrite token ids by source tag.
    pub rewrites: BTreeMap<String, Vec<u32>>,
    pub positive: String,
    pub negatives: Vec<String>,
    pub positive_score: f64,
    pub negative_scores: Vec<f64>,
    /// Set when mining ran out of teacher candidates and padded with random
    /// corpus documents.
    #[serde(default)]
    pub filled: bool,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::Degenerate(format!(
                "example {}#{} has no negatives",
                self.conversation_id, self.turn
            )));
        }
        if self.negatives.len() != self.negative_scores.len() {
            return Err(Error::MissingTeacherScore(format!(
                "{} negatives but {} scores in example {}#{}",
                self.negatives.len(),
                self.negative_scores.len(),
                self.conversation_id,
                self.turn
            )));
        }
        if self.negatives.contains(&self.positive) {
            return Err(Error::InvalidConfig(format!(
                "positive {} listed as negative in example {}#{}",
                self.positive, self.conversation_id, self.turn
            )));
        }
        if self.query_tokens.is_empty() {
            return Err(Error::Degenerate("empty query tokens".into()));
        }
        if !self.positive_score.is_finite() || self.negative_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!(
                "teacher score in example {}#{}",
                self.conversation_id, self.turn
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegatives {
    pub ids: Vec<String>,
    pub filled: bool,
}

/// Samples `n` negatives uniformly from the ensemble's top `pool_size`
/// documents (by aggregated score) after removing positives. Sampled ids are
/// returned in teacher rank order. If the pool runs short, the remainder is
/// drawn from the rest of the corpus and the result is flagged.
pub fn mine_hard_negatives(
    ensemble: &TeacherEnsemble,
    teacher_reps: &[SparseVec],
    index: &InvertedIndex,
    positives: &[String],
    pool_size: usize,
    n: usize,
    seed: u64,
) -> Result<MinedNegatives> {
    if n == 0 || pool_size < n {
        return Err(Error::InvalidConfig(format!(
            "need pool_size >= negatives >= 1 (pool {pool_size}, negatives {n})"
        )));
    }
    if teacher_reps.len() != ensemble.len() {
        return Err(Error::Shape(
            "one representation per teacher required".into(),
        ));
    }
    let per_teacher: Vec<Vec<f64>> = teacher_reps.iter().map(|r| index.score_all(r)).collect();
    let ext = index.ext_ids();
    let mut ranked: Vec<(usize, f64)> = Vec::new();
    let mut buf = vec![0.0; per_teacher.len()];
    for d in 0..ext.len() {
        for (b, s) in buf.iter_mut().zip(&per_teacher) {
            *b = s[d];
        }
        let agg = ensemble.aggregation().apply(&buf)?;
        if agg > 0.0 {
            ranked.push((d, agg));
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ext[a.0].cmp(&ext[b.0])));
    ranked.truncate(pool_size);

    let positive_set: HashSet<&str> = positives.iter().map(String::as_str).collect();
    let pool: Vec<usize> = ranked
        .iter()
        .map(|&(d, _)| d)
        .filter(|&d| !positive_set.contains(ext[d].as_str()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = pool.len().min(n);
    let mut picks = sample(&mut rng, pool.len(), take).into_vec();
    picks.sort_unstable();
    let mut ids: Vec<String> = picks.into_iter().map(|i| ext[pool[i]].clone()).collect();

    let filled = ids.len() < n;
    if filled {
        let chosen: HashSet<String> = ids.iter().cloned().collect();
        let mut rest: Vec<&String> = ext
            .iter()
            .filter(|id| !positive_set.contains(id.as_str()) && !chosen.contains(*id))
            .collect();
        rest.sort();
        let need = n - ids.len();
        if rest.len() < need {
            return Err(Error::Degenerate(format!(
                "corpus too small to supply {n} negatives"
            )));
        }
        let mut extra = sample(&mut rng, rest.len(), need).into_vec();
        extra.sort_unstable();
        ids.extend(extra.into_iter().map(|i| rest[i].clone()));
    }
    Ok(MinedNegatives { ids, filled })
}
