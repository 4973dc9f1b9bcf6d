//! Corpora, conversations and a synthetic conversational-search generator.
//!
//! File formats (JSON lines):
//!
//! * corpus: `{"id": str, "text": str}`
//! * conversations: `{"id": str, "turns": [{"utterance": str, "answer": str,
//!   "rewrites": {tag: str}, "relevant": [doc-id]}]}`
//!
//! Relevance judgments are written as TREC qrels with query id
//! `<conversation-id>_<turn>`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel, TurnTokens};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, Qrels};
use crate::index::InvertedIndex;
use crate::vocab::{Vocabulary, SEP_TOKEN};

/// Rewrite tag of the gold (human) rewrite.
pub const GOLD_TAG: &str = "human";

/// Scale of the bag-of-words encoder used as the frozen ad-hoc model.
pub const AD_HOC_SCALE: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Turn {
    pub utterance: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub rewrites: BTreeMap<String, String>,
    #[serde(default)]
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

pub fn query_id(conversation: &str, turn: usize) -> String {
    format!("{conversation}_{turn}")
}

impl Conversation {
    /// Token ids of every turn plus the number of dropped OOV tokens.
    pub fn tokenize(&self, vocab: &Vocabulary) -> (Vec<TurnTokens>, usize) {
        let mut oov = 0;
        let turns = self
            .turns
            .iter()
            .map(|t| {
                let (utterance, a) = vocab.tokenize(&t.utterance);
                let (answer, b) = vocab.tokenize(&t.answer);
                oov += a + b;
                TurnTokens { utterance, answer }
            })
            .collect();
        (turns, oov)
    }
}

fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R, source: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a, I: IntoIterator<Item = &'a T>>(
    path: &Path,
    items: I,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f), path)
}

impl Corpus {
    pub fn read_from<R: BufRead>(reader: R, source: &Path) -> Result<Self> {
        let docs: Vec<Document> = read_jsonl(reader, source)?;
        let mut seen = HashSet::new();
        for d in &docs {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::DuplicateId(d.id.clone()));
            }
            if d.text.trim().is_empty() {
                return Err(Error::Degenerate(format!(
                    "document {} has empty text",
                    d.id
                )));
            }
        }
        Ok(Self { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.docs)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = std::fs::File::open(path)?;
    Corpus::read_from(std::io::BufReader::new(f), path)
}

pub fn read_conversations<R: BufRead>(reader: R, source: &Path) -> Result<Vec<Conversation>> {
    let convs: Vec<Conversation> = read_jsonl(reader, source)?;
    let mut seen = HashSet::new();
    for c in &convs {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::DuplicateId(c.id.clone()));
        }
        if c.turns.is_empty() {
            return Err(Error::Degenerate(format!(
                "conversation {} has no turns",
                c.id
            )));
        }
    }
    Ok(convs)
}

pub fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let f = std::fs::File::open(path)?;
    read_conversations(std::io::BufReader::new(f), path)
}

pub fn save_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    write_jsonl(path, convs)
}

/// Binary qrels (grade 1) from each turn's relevant list.
pub fn qrels_from_conversations(convs: &[Conversation]) -> Qrels {
    let mut q = Qrels::new();
    for c in convs {
        for (t, turn) in c.turns.iter().enumerate() {
            for d in &turn.relevant {
                q.insert(query_id(&c.id, t), d.clone(), 1);
            }
        }
    }
    q
}

/// Deterministic split: the last `ceil(n · test_fraction)` conversations are
/// held out.
pub fn split_conversations(
    convs: &[Conversation],
    test_fraction: f64,
) -> Result<(Vec<Conversation>, Vec<Conversation>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(
            "test_fraction must be in [0, 1)".into(),
        ));
    }
    let n_test = (convs.len() as f64 * test_fraction).ceil() as usize;
    let cut = convs.len() - n_test.min(convs.len());
    Ok((convs[..cut].to_vec(), convs[cut..].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub docs_per_topic: usize,
    pub conversations: usize,
    pub turns_per_conversation: usize,
    pub topic_switch_prob: f64,
    /// Probability that a follow-up utterance leaves out its topic words.
    pub omission_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 300,
            num_topics: 20,
            docs_per_topic: 10,
            conversations: 300,
            turns_per_conversation: 6,
            topic_switch_prob: 0.2,
            omission_rate: 0.5,
            seed: 0,
        }
    }
}

const TOPIC_KEYS: usize = 3;
const TOPIC_BODY: usize = 5;
const BODY_PER_DOC: usize = 3;
const ASPECTS_PER_DOC: usize = 4;
const MIN_FILLER: usize = 20;
const FILLER_PER_DOC: (usize, usize) = (8, 16);
const ANSWER_TOKENS: usize = 10;
const MAX_ATTEMPTS: u64 = 16;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.num_topics,
            self.docs_per_topic,
            self.conversations,
            self.turns_per_conversation,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig(
                "synthetic counts must be positive".into(),
            ));
        }
        for (name, p) in [
            ("topic_switch_prob", self.topic_switch_prob),
            ("omission_rate", self.omission_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.topic_switch_prob > 0.0 && self.num_topics < 2 {
            return Err(Error::InvalidConfig(
                "topic switches need at least two topics".into(),
            ));
        }
        let needed = self.required_vocab();
        if self.vocab_size < needed {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} cannot hold {} topics with {} docs each (need {needed})",
                self.vocab_size, self.num_topics, self.docs_per_topic
            )));
        }
        Ok(())
    }

    fn aspect_pool(&self) -> usize {
        self.docs_per_topic * ASPECTS_PER_DOC
    }

    fn required_vocab(&self) -> usize {
        1 + self.num_topics * (TOPIC_KEYS + TOPIC_BODY) + self.aspect_pool() + MIN_FILLER
    }
}

/// Output of [`generate_synthetic`]. Gold rewrites are stored in each turn's
/// `rewrites` under [`GOLD_TAG`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub conversations: Vec<Conversation>,
    pub qrels: Qrels,
}

/// (doc id, aspect tokens, full token list).
type SynthDoc = (String, Vec<String>, Vec<String>);

struct World {
    keys: Vec<Vec<String>>,
    /// Per topic, per doc.
    docs: Vec<Vec<SynthDoc>>,
}

fn build_vocab(cfg: &SynthConfig) -> Result<Vocabulary> {
    let mut tokens = vec![SEP_TOKEN.to_string()];
    for t in 0..cfg.num_topics {
        tokens.extend((0..TOPIC_KEYS).map(|k| format!("t{t}k{k}")));
        tokens.extend((0..TOPIC_BODY).map(|k| format!("t{t}b{k}")));
    }
    tokens.extend((0..cfg.aspect_pool()).map(|a| format!("a{a}")));
    let filler = cfg.vocab_size - tokens.len();
    tokens.extend((0..filler).map(|w| format!("w{w}")));
    Vocabulary::new(tokens)
}

fn build_world(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> World {
    let filler_count = cfg.vocab_size - cfg.required_vocab() + MIN_FILLER;
    let mut keys = Vec::new();
    let mut docs = Vec::new();
    for t in 0..cfg.num_topics {
        let topic_keys: Vec<String> = (0..TOPIC_KEYS).map(|k| format!("t{t}k{k}")).collect();
        let body: Vec<String> = (0..TOPIC_BODY).map(|k| format!("t{t}b{k}")).collect();
        let mut aspects: Vec<usize> = (0..cfg.aspect_pool()).collect();
        aspects.shuffle(rng);
        let mut topic_docs = Vec::new();
        for (k, chunk) in aspects.chunks(ASPECTS_PER_DOC).enumerate() {
            let asp: Vec<String> = chunk.iter().map(|a| format!("a{a}")).collect();
            let mut rest: Vec<String> = body
                .choose_multiple(rng, BODY_PER_DOC)
                .cloned()
                .chain(asp.iter().cloned())
                .collect();
            let n_fill = rng.gen_range(FILLER_PER_DOC.0..=FILLER_PER_DOC.1);
            rest.extend((0..n_fill).map(|_| format!("w{}", rng.gen_range(0..filler_count))));
            rest.shuffle(rng);
            let mut text = topic_keys.clone();
            text.extend(rest);
            topic_docs.push((format!("d{t:03}_{k:03}"), asp, text));
        }
        keys.push(topic_keys);
        docs.push(topic_docs);
    }
    World { keys, docs }
}

fn build_conversations(
    cfg: &SynthConfig,
    world: &World,
    rng: &mut ChaCha8Rng,
) -> Vec<Conversation> {
    (0..cfg.conversations)
        .map(|c| {
            let mut topic = rng.gen_range(0..cfg.num_topics);
            let mut doc = rng.gen_range(0..cfg.docs_per_topic);
            let mut turns = Vec::with_capacity(cfg.turns_per_conversation);
            for t in 0..cfg.turns_per_conversation {
                let mut segment_start = t == 0;
                if t > 0 && rng.gen_bool(cfg.topic_switch_prob) {
                    let shift = rng.gen_range(1..cfg.num_topics);
                    topic = (topic + shift) % cfg.num_topics;
                    doc = rng.gen_range(0..cfg.docs_per_topic);
                    segment_start = true;
                }
                let (doc_id, aspects, text) = &world.docs[topic][doc];
                let aspect = aspects.choose(rng).expect("docs have aspects").clone();
                let omitted = !segment_start && rng.gen_bool(cfg.omission_rate);
                let keys = world.keys[topic].join(" ");
                let rewrite = format!("{keys} {aspect}");
                let utterance = if omitted { aspect } else { rewrite.clone() };
                turns.push(Turn {
                    utterance,
                    answer: text[..ANSWER_TOKENS.min(text.len())].join(" "),
                    rewrites: BTreeMap::from([(GOLD_TAG.to_string(), rewrite)]),
                    relevant: vec![doc_id.clone()],
                });
            }
            Conversation {
                id: format!("c{c:04}"),
                turns,
            }
        })
        .collect()
}

/// Mean Recall@10 of (gold rewrite, raw utterance) under the bag-of-words
/// ad-hoc encoder.
pub fn rewrite_advantage(data: &SynthData) -> Result<(f64, f64)> {
    let v = data.vocab.len();
    let model = EncoderModel::lexical(EncoderConfig::new(v, v), AD_HOC_SCALE)?;
    let docs = data
        .corpus
        .docs
        .iter()
        .map(|d| {
            Ok((
                d.id.clone(),
                model.encode_doc(&data.vocab.tokenize(&d.text).0)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let index = InvertedIndex::build(v, docs)?;
    let (mut rw, mut utt, mut n) = (0.0, 0.0, 0usize);
    for c in &data.conversations {
        for (t, turn) in c.turns.iter().enumerate() {
            let qid = query_id(&c.id, t);
            let score = |text: &str| -> Result<f64> {
                let rep = model.encode_query(&data.vocab.tokenize(text).0)?;
                let run = index.search(&qid, &rep, 10, "check")?;
                Ok(recall_at_k(&run, &data.qrels, 10, 1).unwrap_or(0.0))
            };
            rw += score(&turn.rewrites[GOLD_TAG])?;
            utt += score(&turn.utterance)?;
            n += 1;
        }
    }
    Ok((rw / n as f64, utt / n as f64))
}

/// Generates a seeded synthetic dataset. When `omission_rate > 0` the data is
/// regenerated (from a derived seed) until the gold rewrite beats the raw
/// utterance on Recall@10.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let vocab = build_vocab(cfg)?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)));
        let world = build_world(cfg, &mut rng);
        let conversations = build_conversations(cfg, &world, &mut rng);
        let corpus = Corpus {
            docs: world
                .docs
                .iter()
                .flatten()
                .map(|(id, _, toks)| Document {
                    id: id.clone(),
                    text: toks.join(" "),
                })
                .collect(),
        };
        let qrels = qrels_from_conversations(&conversations);
        let data = SynthData {
            vocab: vocab.clone(),
            corpus,
            conversations,
            qrels,
        };
        if cfg.omission_rate == 0.0 {
            return Ok(data);
        }
        let (rw, utt) = rewrite_advantage(&data)?;
        if rw > utt {
            return Ok(data);
        }
        log::warn!("synthetic attempt {attempt}: rewrite recall {rw:.4} <= utterance {utt:.4}; regenerating");
    }
    Err(Error::InvalidConfig(
        "could not generate data where gold rewrites beat raw utterances".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            vocab_size: 200,
            num_topics: 15,
            docs_per_topic: 5,
            conversations: 20,
            turns_per_conversation: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_and_duplicate_corpus() {
        let p = Path::new("corpus.jsonl");
        assert!(Corpus::read_from("".as_bytes(), p).unwrap().is_empty());
        let dup = "{\"id\":\"x\",\"text\":\"a\"}\n{\"id\":\"x\",\"text\":\"b\"}\n";
        assert!(
            matches!(Corpus::read_from(dup.as_bytes(), p), Err(Error::DuplicateId(id)) if id == "x")
        );
        match Corpus::read_from("{\"id\":\"x\",\"text\":\"a\"}\nnot json\n".as_bytes(), p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conversations_parse_optional_fields() {
        let line = r#"{"id":"c1","turns":[{"utterance":"hi there"}]}"#;
        let convs = read_conversations(line.as_bytes(), Path::new("c.jsonl")).unwrap();
        assert_eq!(convs[0].turns[0].answer, "");
        assert!(convs[0].turns[0].rewrites.is_empty());
    }

    #[test]
    fn unsatisfiable_config_rejected() {
        let cfg = SynthConfig {
            vocab_size: 50,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn no_omission_means_utterance_is_rewrite() {
        let cfg = SynthConfig {
            omission_rate: 0.0,
            ..small()
        };
        let data = generate_synthetic(&cfg).unwrap();
        for c in &data.conversations {
            for t in &c.turns {
                assert_eq!(t.utterance, t.rewrites[GOLD_TAG]);
            }
        }
    }

    #[test]
    fn no_switch_keeps_one_topic() {
        let cfg = SynthConfig {
            topic_switch_prob: 0.0,
            ..small()
        };
        let data = generate_synthetic(&cfg).unwrap();
        for c in &data.conversations {
            let topics: HashSet<&str> = c.turns.iter().map(|t| &t.relevant[0][..4]).collect();
            assert_eq!(topics.len(), 1);
        }
    }

    #[test]
    fn generation_is_seeded_and_consistent() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<&str> = a.corpus.docs.iter().map(|d| d.id.as_str()).collect();
        for c in &a.conversations {
            for (t, turn) in c.turns.iter().enumerate() {
                assert!(!turn.relevant.is_empty());
                assert!(turn.relevant.iter().all(|d| ids.contains(d.as_str())));
                let judged = a.qrels.query(&query_id(&c.id, t)).unwrap();
                assert!(judged.values().any(|&g| g >= 1));
                let (toks, oov) = a.vocab.tokenize(&turn.rewrites[GOLD_TAG]);
                assert_eq!(oov, 0);
                assert!(!toks.is_empty());
            }
        }
        let other = generate_synthetic(&SynthConfig { seed: 5, ..small() }).unwrap();
        assert_ne!(a.conversations, other.conversations);
    }

    #[test]
    fn gold_rewrite_beats_utterance() {
        let cfg = SynthConfig {
            omission_rate: 0.6,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let (rw, utt) = rewrite_advantage(&data).unwrap();
        assert!(rw - utt > 0.0, "rewrite {rw} utterance {utt}");
    }

    #[test]
    fn round_trip_through_files() {
        let data = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("corpus.jsonl");
        let vp = dir.path().join("conv.jsonl");
        data.corpus.save(&cp).unwrap();
        save_conversations(&vp, &data.conversations).unwrap();
        assert_eq!(load_corpus(&cp).unwrap(), data.corpus);
        assert_eq!(load_conversations(&vp).unwrap(), data.conversations);
    }

    #[test]
    fn split_is_deterministic() {
        let data = generate_synthetic(&small()).unwrap();
        let (train, test) = split_conversations(&data.conversations, 0.25).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(test.len(), 5);
        assert_eq!(test[0].id, "c0015");
    }
}
