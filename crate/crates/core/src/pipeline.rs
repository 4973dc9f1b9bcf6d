//! Experiment manifest and the stages behind each command-line subcommand.
//!
//! All stages read their inputs from the manifest's data paths or from the
//! output directory, and write their artifacts plus a `<stage>.summary.json`
//! into the output directory. Wall-clock timings only ever appear in the
//! `metadata` field of training reports.
//!
//! Output layout:
//!
//! ```text
//! index.json                     frozen document index
//! teacher_scores.jsonl           one ScoreRecord per (turn, candidate)
//! examples.jsonl                 one TrainingExample per training turn
//! checkpoints/<objective>/       epoch-N.json and model.json
//! train_<objective>.json/.csv    training report and per-epoch losses
//! runs/<tag>.trec                TREC run
//! runs/<tag>.queries.jsonl       query encodings of that run
//! eval_<tag>.json/.csv           evaluation report
//! sweep_lambda.csv               lambda_q sweep
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    self, load_conversations, load_corpus, query_id, split_conversations, Conversation, Corpus,
    SynthConfig,
};
use crate::distill::{
    mine_hard_negatives, teacher_scores, Aggregation, DocStore, ScoreRecord, Teacher,
    TeacherEnsemble, TrainingExample,
};
use crate::encoder::{flatten_conversation, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, fuse, Encodings, EvalConfig, EvalReport, Qrels};
use crate::index::{read_trec, write_trec, InvertedIndex, RunList};
use crate::sparse::SparseVec;
use crate::trainer::{train, Objective, TrainConfig, TrainReport};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub conversations: PathBuf,
    pub qrels: PathBuf,
    pub vocab: PathBuf,
    pub outputs: PathBuf,
    /// Defaults to `<outputs>/checkpoints`.
    pub checkpoints: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.jsonl".into(),
            conversations: "data/conversations.jsonl".into(),
            qrels: "data/qrels.txt".into(),
            vocab: "data/vocab.txt".into(),
            outputs: "out".into(),
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub lambda_q: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_q: vec![0.0, 1e-4, 1e-3, 1e-2],
        }
    }
}

/// Truncation limits of every encoder built by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderLimits {
    pub max_query_tokens: usize,
    pub max_answer_tokens: usize,
    pub max_context_tokens: usize,
    pub max_doc_tokens: usize,
}

impl Default for EncoderLimits {
    fn default() -> Self {
        let c = EncoderConfig::new(1, 1);
        Self {
            max_query_tokens: c.max_query_tokens,
            max_answer_tokens: c.max_answer_tokens,
            max_context_tokens: c.max_context_tokens,
            max_doc_tokens: c.max_doc_tokens,
        }
    }
}

impl EncoderLimits {
    /// Bag-of-words configuration (hidden width = vocabulary size).
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            max_query_tokens: self.max_query_tokens,
            max_answer_tokens: self.max_answer_tokens,
            max_context_tokens: self.max_context_tokens,
            max_doc_tokens: self.max_doc_tokens,
            ..EncoderConfig::new(vocab_size, vocab_size)
        }
    }
}

/// Everything needed to reproduce an experiment. Relative paths are resolved
/// against the manifest's directory. `seed` drives data generation, mining
/// and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentManifest {
    pub seed: u64,
    /// Fraction of conversations (taken from the end) held out for retrieval.
    pub test_fraction: f64,
    /// Rewrite tags, one frozen teacher each.
    pub teachers: Vec<String>,
    pub aggregation: Aggregation,
    pub lexical_scale: f64,
    /// Teacher top-k from which hard negatives are sampled.
    pub pool_size: usize,
    pub k: usize,
    pub encoder: EncoderLimits,
    pub paths: Paths,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub synth: Option<SynthConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
            teachers: vec![data::GOLD_TAG.to_string()],
            aggregation: Aggregation::Mean,
            lexical_scale: data::AD_HOC_SCALE,
            pool_size: 100,
            k: 100,
            encoder: EncoderLimits::default(),
            paths: Paths::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            synth: None,
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        m.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest {
            path: self.base_dir.clone(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.teachers.is_empty() {
            return bad("at least one teacher tag is required".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)".into());
        }
        if !(self.lexical_scale.is_finite() && self.lexical_scale > 0.0) {
            return bad("lexical_scale must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.pool_size < self.train.negatives {
            return bad(format!(
                "pool_size {} is smaller than negatives {}",
                self.pool_size, self.train.negatives
            ));
        }
        if self
            .sweep
            .lambda_q
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return bad("sweep lambdas must be non-negative".into());
        }
        self.train.validate()?;
        self.encoder.config(1).validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.paths.outputs)
    }

    pub fn checkpoint_dir(&self, objective: Objective) -> PathBuf {
        let root = match &self.paths.checkpoints {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("checkpoints"),
        };
        root.join(objective.as_str())
    }

    pub fn ad_hoc_model(&self, vocab_size: usize) -> Result<EncoderModel> {
        ad_hoc_model(self.encoder.config(vocab_size), self.lexical_scale)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn synth_config(&self) -> Option<SynthConfig> {
        self.synth.clone().map(|s| SynthConfig {
            seed: self.seed,
            ..s
        })
    }
}

pub fn require(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = std::fs::File::open(require(path)?)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

fn write_summary(m: &ExperimentManifest, stage: &str, summary: &serde_json::Value) -> Result<()> {
    write_json(&m.out_dir().join(format!("{stage}.summary.json")), summary)
}

/// The frozen bag-of-words encoder shared by teachers and documents.
pub fn ad_hoc_model(config: EncoderConfig, scale: f64) -> Result<EncoderModel> {
    Ok(EncoderModel::lexical(config, scale)?.freeze())
}

pub fn encode_corpus(
    model: &EncoderModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
) -> Result<Vec<(String, SparseVec)>> {
    corpus
        .docs
        .par_iter()
        .map(|d| {
            let (toks, _) = vocab.tokenize(&d.text);
            Ok((d.id.clone(), model.encode_doc(&toks)?))
        })
        .collect()
}

pub fn teacher_ensemble(
    model: &EncoderModel,
    tags: &[String],
    aggregation: Aggregation,
) -> Result<TeacherEnsemble> {
    let teachers = tags
        .iter()
        .map(|t| Teacher {
            name: t.clone(),
            model: model.clone(),
            source: t.clone(),
        })
        .collect();
    TeacherEnsemble::new(teachers, aggregation)
}

#[derive(Debug, Clone, Copy)]
pub struct MiningConfig {
    pub negatives: usize,
    pub pool_size: usize,
    pub seed: u64,
}

/// Builds one training example per turn whose rewrites are all present,
/// together with the teacher score records of its candidates.
pub fn build_examples(
    vocab: &Vocabulary,
    config: &EncoderConfig,
    convs: &[Conversation],
    index: &InvertedIndex,
    ensemble: &TeacherEnsemble,
    gold_source: &str,
    mining: MiningConfig,
) -> Result<(Vec<TrainingExample>, Vec<ScoreRecord>)> {
    let sep = vocab.sep_id()?;
    let mut sources: BTreeSet<&str> = ensemble
        .teachers()
        .iter()
        .map(|t| t.source.as_str())
        .collect();
    sources.insert(gold_source);

    let mut jobs = Vec::new();
    for c in convs {
        let (turns, _) = c.tokenize(vocab);
        for (t, turn) in c.turns.iter().enumerate() {
            if turn.relevant.is_empty() {
                continue;
            }
            let mut rewrites = BTreeMap::new();
            for &s in &sources {
                let toks = turn
                    .rewrites
                    .get(s)
                    .map(|r| vocab.tokenize(r).0)
                    .unwrap_or_default();
                if toks.is_empty() {
                    break;
                }
                rewrites.insert(s.to_string(), toks);
            }
            if rewrites.len() != sources.len() {
                log::warn!("{}: missing rewrite; turn skipped", query_id(&c.id, t));
                continue;
            }
            let query_tokens = flatten_conversation(&turns, t, config, sep)?;
            jobs.push((c, t, query_tokens, rewrites));
        }
    }

    let store = DocStore::new(index.doc_vectors())?;
    let built: Vec<(TrainingExample, Vec<ScoreRecord>)> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(i, (c, t, query_tokens, rewrites))| {
            let turn = &c.turns[t];
            let reps = ensemble.encode_rewrites(&rewrites)?;
            let seed = mining.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mined = mine_hard_negatives(
                ensemble,
                &reps,
                index,
                &turn.relevant,
                mining.pool_size,
                mining.negatives,
                seed,
            )?;
            let positive = turn.relevant[0].clone();
            let cands = std::iter::once(&positive)
                .chain(&mined.ids)
                .map(|id| Ok((id.as_str(), store.get(id)?)))
                .collect::<Result<Vec<_>>>()?;
            let records = teacher_scores(ensemble, &c.id, t, &rewrites, &cands)?;
            let example = TrainingExample {
                conversation_id: c.id.clone(),
                turn: t,
                query_tokens,
                rewrites,
                positive,
                negatives: mined.ids,
                positive_score: records[0].aggregate,
                negative_scores: records[1..].iter().map(|r| r.aggregate).collect(),
                filled: mined.filled,
            };
            Ok((example, records))
        })
        .collect::<Result<_>>()?;

    let mut examples = Vec::with_capacity(built.len());
    let mut records = Vec::new();
    for (e, r) in built {
        examples.push(e);
        records.extend(r);
    }
    Ok((examples, records))
}

/// What a run encodes as its query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuerySource {
    /// Flattened conversation (the student's input).
    Context,
    Rewrite(String),
    Utterance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEncoding {
    pub query_id: String,
    pub depth: usize,
    pub rep: SparseVec,
}

/// Encodes every turn of `convs`; turns without usable text are skipped.
pub fn encode_queries(
    model: &EncoderModel,
    vocab: &Vocabulary,
    convs: &[Conversation],
    source: &QuerySource,
) -> Result<Vec<QueryEncoding>> {
    let sep = vocab.sep_id()?;
    let mut jobs = Vec::new();
    for c in convs {
        let (turns, _) = c.tokenize(vocab);
        for (t, turn) in c.turns.iter().enumerate() {
            let toks = match source {
                QuerySource::Context => flatten_conversation(&turns, t, model.config(), sep)?,
                QuerySource::Utterance => turns[t].utterance.clone(),
                QuerySource::Rewrite(tag) => turn
                    .rewrites
                    .get(tag)
                    .map(|r| vocab.tokenize(r).0)
                    .unwrap_or_default(),
            };
            if toks.is_empty() {
                log::warn!("{}: empty query; skipped", query_id(&c.id, t));
                continue;
            }
            jobs.push((query_id(&c.id, t), t, toks));
        }
    }
    jobs.into_par_iter()
        .map(|(query_id, depth, toks)| {
            let rep = match source {
                QuerySource::Context => {
                    model.encode(&toks[..toks.len().min(model.config().max_context_tokens)])?
                }
                _ => model.encode_query(&toks)?,
            };
            Ok(QueryEncoding {
                query_id,
                depth,
                rep,
            })
        })
        .collect()
}

pub fn retrieve(
    index: &InvertedIndex,
    queries: &[QueryEncoding],
    k: usize,
    tag: &str,
) -> Result<Vec<RunList>> {
    queries
        .par_iter()
        .map(|q| index.search(&q.query_id, &q.rep, k, tag))
        .collect()
}

/// Judgments of the turns of `convs` only.
pub fn restrict_qrels(qrels: &Qrels, convs: &[Conversation]) -> Qrels {
    let mut out = Qrels::new();
    for c in convs {
        for t in 0..c.turns.len() {
            let qid = query_id(&c.id, t);
            if let Some(judged) = qrels.query(&qid) {
                for (d, &g) in judged {
                    out.insert(qid.clone(), d.clone(), g);
                }
            }
        }
    }
    out
}

pub fn evaluate_runs(
    runs: &[RunList],
    qrels: &Qrels,
    config: &EvalConfig,
    queries: Option<&[QueryEncoding]>,
    index: &InvertedIndex,
) -> Result<EvalReport> {
    let by_query: BTreeMap<String, RunList> = runs
        .iter()
        .map(|r| (r.query_id.clone(), r.clone()))
        .collect();
    match queries {
        Some(qs) => {
            let reps: Vec<SparseVec> = qs.iter().map(|q| q.rep.clone()).collect();
            let depths: Vec<usize> = qs.iter().map(|q| q.depth).collect();
            let docs: Vec<SparseVec> = index.doc_vectors().into_iter().map(|(_, v)| v).collect();
            evaluate(
                &by_query,
                qrels,
                config,
                Some(Encodings {
                    queries: &reps,
                    query_depths: &depths,
                    docs: &docs,
                }),
            )
        }
        None => evaluate(&by_query, qrels, config, None),
    }
}

/// Loaded inputs shared by the later stages.
pub struct Inputs {
    pub vocab: Vocabulary,
    pub train: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

pub fn load_inputs(m: &ExperimentManifest) -> Result<Inputs> {
    let vocab = Vocabulary::load(require(&m.resolve(&m.paths.vocab))?)?;
    let convs = load_conversations(require(&m.resolve(&m.paths.conversations))?)?;
    let (train, test) = split_conversations(&convs, m.test_fraction)?;
    Ok(Inputs { vocab, train, test })
}

pub fn load_index(m: &ExperimentManifest) -> Result<InvertedIndex> {
    read_json(&m.out_dir().join("index.json"))
}

pub fn load_examples(m: &ExperimentManifest) -> Result<Vec<TrainingExample>> {
    data::load_jsonl(require(&m.out_dir().join("examples.jsonl"))?)
}

fn prepare_out(m: &ExperimentManifest) -> Result<PathBuf> {
    m.validate()?;
    let out = m.out_dir();
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

pub fn cmd_synth(m: &ExperimentManifest) -> Result<serde_json::Value> {
    prepare_out(m)?;
    let cfg = m
        .synth_config()
        .ok_or_else(|| Error::InvalidConfig("manifest has no [synth] section".into()))?;
    let generated = data::generate_synthetic(&cfg)?;
    let (rw, utt) = data::rewrite_advantage(&generated)?;
    for p in [
        &m.paths.corpus,
        &m.paths.conversations,
        &m.paths.qrels,
        &m.paths.vocab,
    ] {
        if let Some(dir) = m.resolve(p).parent() {
            std::fs::create_dir_all(dir)?;
        }
    }
    generated.corpus.save(&m.resolve(&m.paths.corpus))?;
    data::save_conversations(&m.resolve(&m.paths.conversations), &generated.conversations)?;
    generated
        .qrels
        .write_trec(BufWriter::new(std::fs::File::create(
            m.resolve(&m.paths.qrels),
        )?))?;
    generated.vocab.save(&m.resolve(&m.paths.vocab))?;
    let summary = json!({
        "documents": generated.corpus.len(),
        "conversations": generated.conversations.len(),
        "judged_queries": generated.qrels.len(),
        "vocab_size": generated.vocab.len(),
        "recall10_gold_rewrite": rw,
        "recall10_utterance": utt,
    });
    write_summary(m, "synth", &summary)?;
    Ok(summary)
}

pub fn cmd_index(m: &ExperimentManifest) -> Result<serde_json::Value> {
    let out = prepare_out(m)?;
    let vocab = Vocabulary::load(require(&m.resolve(&m.paths.vocab))?)?;
    let corpus = load_corpus(require(&m.resolve(&m.paths.corpus))?)?;
    let model = m.ad_hoc_model(vocab.len())?;
    let index = InvertedIndex::build(vocab.len(), encode_corpus(&model, &vocab, &corpus)?)?;
    write_json(&out.join("index.json"), &index)?;
    let summary = json!({
        "documents": index.doc_count(),
        "postings": index.total_postings(),
        "mean_doc_nnz": index.total_postings() as f64 / index.doc_count().max(1) as f64,
    });
    write_summary(m, "index", &summary)?;
    Ok(summary)
}

pub fn cmd_teacher_scores(m: &ExperimentManifest) -> Result<serde_json::Value> {
    let out = prepare_out(m)?;
    let inputs = load_inputs(m)?;
    let index = load_index(m)?;
    let model = m.ad_hoc_model(inputs.vocab.len())?;
    let ensemble = teacher_ensemble(&model, &m.teachers, m.aggregation)?;
    let (examples, records) = build_examples(
        &inputs.vocab,
        model.config(),
        &inputs.train,
        &index,
        &ensemble,
        &m.train.gold_source,
        MiningConfig {
            negatives: m.train.negatives,
            pool_size: m.pool_size,
            seed: m.seed,
        },
    )?;
    data::write_jsonl(&out.join("teacher_scores.jsonl"), &records)?;
    data::write_jsonl(&out.join("examples.jsonl"), &examples)?;
    let summary = json!({
        "teachers": m.teachers,
        "examples": examples.len(),
        "score_records": records.len(),
        "filled_examples": examples.iter().filter(|e| e.filled).count(),
    });
    write_summary(m, "teacher_scores", &summary)?;
    Ok(summary)
}

/// Trains one student with the manifest's training config.
pub fn train_student(
    m: &ExperimentManifest,
    config: &TrainConfig,
    examples: &[TrainingExample],
    index: &InvertedIndex,
    checkpoint_dir: Option<&Path>,
) -> Result<(EncoderModel, TrainReport)> {
    let model = m.ad_hoc_model(index.dim())?;
    let ensemble = teacher_ensemble(&model, &m.teachers, m.aggregation)?;
    let docs = DocStore::new(index.doc_vectors())?;
    train(
        config,
        examples,
        &model.trainable_copy(),
        &ensemble,
        &docs,
        checkpoint_dir,
    )
}

pub fn cmd_train(m: &ExperimentManifest) -> Result<serde_json::Value> {
    let out = prepare_out(m)?;
    let index = load_index(m)?;
    let examples = load_examples(m)?;
    let config = m.train_config();
    let dir = m.checkpoint_dir(config.objective);
    let (student, report) = train_student(m, &config, &examples, &index, Some(&dir))?;
    student.save(&dir.join("model.json"))?;
    let name = config.objective.as_str();
    write_json(&out.join(format!("train_{name}.json")), &report)?;
    report.write_csv(BufWriter::new(std::fs::File::create(
        out.join(format!("train_{name}.csv")),
    )?))?;
    let last = report.epochs.last().expect("at least one epoch");
    let summary = json!({
        "objective": name,
        "examples": report.examples,
        "epochs": report.epochs.len(),
        "final_loss": last.mean_total,
        "final_distill": last.mean_distill,
        "final_query_nnz": last.mean_query_nnz,
        "checkpoint": format!("{name}/model.json"),
    });
    write_summary(m, &format!("train_{name}"), &summary)?;
    Ok(summary)
}

/// Which encoder and query text a retrieval run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunKind {
    /// Trained student on the conversation context.
    Student(Objective),
    /// Frozen teacher on a rewrite.
    Teacher(String),
    /// Frozen teacher on the raw last utterance.
    Utterance,
}

impl RunKind {
    pub fn tag(&self) -> &str {
        match self {
            RunKind::Student(o) => o.as_str(),
            RunKind::Teacher(_) => "teacher",
            RunKind::Utterance => "utterance",
        }
    }
}

fn run_paths(m: &ExperimentManifest, tag: &str) -> (PathBuf, PathBuf) {
    let dir = m.out_dir().join("runs");
    (
        dir.join(format!("{tag}.trec")),
        dir.join(format!("{tag}.queries.jsonl")),
    )
}

pub fn cmd_retrieve(m: &ExperimentManifest, kind: &RunKind, k: usize) -> Result<serde_json::Value> {
    prepare_out(m)?;
    let inputs = load_inputs(m)?;
    let index = load_index(m)?;
    let (model, source) = match kind {
        RunKind::Student(o) => {
            let path = m.checkpoint_dir(*o).join("model.json");
            (EncoderModel::load(require(&path)?)?, QuerySource::Context)
        }
        RunKind::Teacher(tag) => (
            m.ad_hoc_model(inputs.vocab.len())?,
            QuerySource::Rewrite(tag.clone()),
        ),
        RunKind::Utterance => (m.ad_hoc_model(inputs.vocab.len())?, QuerySource::Utterance),
    };
    let queries = encode_queries(&model, &inputs.vocab, &inputs.test, &source)?;
    let runs = retrieve(&index, &queries, k, kind.tag())?;
    let (run_path, query_path) = run_paths(m, kind.tag());
    std::fs::create_dir_all(run_path.parent().expect("runs dir"))?;
    write_trec(BufWriter::new(std::fs::File::create(&run_path)?), &runs)?;
    data::write_jsonl(&query_path, &queries)?;
    let summary = json!({
        "tag": kind.tag(),
        "queries": queries.len(),
        "k": k,
        "mean_query_nnz": queries.iter().map(|q| q.rep.nnz()).sum::<usize>() as f64 / queries.len().max(1) as f64,
    });
    write_summary(m, &format!("retrieve_{}", kind.tag()), &summary)?;
    Ok(summary)
}

fn load_run(path: &Path) -> Result<BTreeMap<String, RunList>> {
    let f = std::fs::File::open(require(path)?)?;
    read_trec(std::io::BufReader::new(f), path)
}

pub fn cmd_fuse(m: &ExperimentManifest, a: &str, b: &str) -> Result<serde_json::Value> {
    prepare_out(m)?;
    let ra = load_run(&run_paths(m, a).0)?;
    let rb = load_run(&run_paths(m, b).0)?;
    let ids: BTreeSet<&String> = ra.keys().chain(rb.keys()).collect();
    let fused = ids
        .into_iter()
        .map(|q| {
            let ea = RunList::empty(q.as_str(), a);
            let eb = RunList::empty(q.as_str(), b);
            fuse(ra.get(q).unwrap_or(&ea), rb.get(q).unwrap_or(&eb), "fusion")
        })
        .collect::<Result<Vec<_>>>()?;
    let (path, _) = run_paths(m, "fusion");
    write_trec(BufWriter::new(std::fs::File::create(&path)?), &fused)?;
    let summary = json!({ "inputs": [a, b], "queries": fused.len(), "tag": "fusion" });
    write_summary(m, "fuse", &summary)?;
    Ok(summary)
}

pub fn cmd_evaluate(m: &ExperimentManifest, tag: &str) -> Result<serde_json::Value> {
    let out = prepare_out(m)?;
    let inputs = load_inputs(m)?;
    let qrels = restrict_qrels(
        &Qrels::load(require(&m.resolve(&m.paths.qrels))?)?,
        &inputs.test,
    );
    let (run_path, query_path) = run_paths(m, tag);
    let runs: Vec<RunList> = load_run(&run_path)?.into_values().collect();
    let queries: Option<Vec<QueryEncoding>> = if query_path.is_file() {
        Some(data::load_jsonl(&query_path)?)
    } else {
        None
    };
    let index = if queries.is_some() {
        Some(load_index(m)?)
    } else {
        None
    };
    let report = match (&queries, &index) {
        (Some(q), Some(i)) => evaluate_runs(&runs, &qrels, &m.eval, Some(q), i)?,
        _ => {
            let by_query = runs.into_iter().map(|r| (r.query_id.clone(), r)).collect();
            evaluate(&by_query, &qrels, &m.eval, None)?
        }
    };
    write_json(&out.join(format!("eval_{tag}.json")), &report)?;
    report.write_csv(BufWriter::new(std::fs::File::create(
        out.join(format!("eval_{tag}.csv")),
    )?))?;
    let summary = json!({
        "tag": tag,
        "queries": report.queries,
        "mrr": report.mrr,
        "ndcg": report.ndcg,
        "recall": report.recall,
        "flops": report.flops,
    });
    write_summary(m, &format!("eval_{tag}"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_q: f64,
    pub mean_nnz: f64,
    pub flops: f64,
    pub mrr: f64,
}

/// Trains one score-distillation student per `lambda_q` (in parallel) and
/// evaluates each on the held-out conversations.
pub fn sweep_lambda(
    m: &ExperimentManifest,
    inputs: &Inputs,
    index: &InvertedIndex,
    examples: &[TrainingExample],
    qrels: &Qrels,
) -> Result<Vec<SweepRow>> {
    m.sweep
        .lambda_q
        .par_iter()
        .map(|&lambda_q| {
            let config = TrainConfig {
                objective: Objective::DiscoKld,
                lambda_q,
                ..m.train_config()
            };
            let (student, _) = train_student(m, &config, examples, index, None)?;
            let queries =
                encode_queries(&student, &inputs.vocab, &inputs.test, &QuerySource::Context)?;
            let runs = retrieve(index, &queries, m.k, "sweep")?;
            let report = evaluate_runs(&runs, qrels, &m.eval, Some(&queries), index)?;
            Ok(SweepRow {
                lambda_q,
                mean_nnz: queries.iter().map(|q| q.rep.nnz()).sum::<usize>() as f64
                    / queries.len().max(1) as f64,
                flops: report.flops.unwrap_or(0.0),
                mrr: report.mrr,
            })
        })
        .collect()
}

pub fn cmd_sweep_lambda(m: &ExperimentManifest) -> Result<serde_json::Value> {
    let out = prepare_out(m)?;
    let inputs = load_inputs(m)?;
    let index = load_index(m)?;
    let examples = load_examples(m)?;
    let qrels = restrict_qrels(
        &Qrels::load(require(&m.resolve(&m.paths.qrels))?)?,
        &inputs.test,
    );
    let rows = sweep_lambda(m, &inputs, &index, &examples, &qrels)?;
    let mut w = BufWriter::new(std::fs::File::create(out.join("sweep_lambda.csv"))?);
    writeln!(w, "lambda_q,mean_nnz,flops,mrr")?;
    for r in &rows {
        writeln!(w, "{},{},{},{}", r.lambda_q, r.mean_nnz, r.flops, r.mrr)?;
    }
    w.flush()?;
    let summary = json!({ "rows": rows });
    write_summary(m, "sweep_lambda", &summary)?;
    Ok(summary)
}
