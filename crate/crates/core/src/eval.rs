//! Retrieval metrics, run fusion and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{flops_metric, rank_order, DepthBucket, RunList};
use crate::sparse::SparseVec;

/// Graded relevance judgments: query id → doc id → grade.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query.into())
            .or_default()
            .insert(doc.into(), grade);
    }

    pub fn query(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Reads TREC qrels: `<qid> 0 <docid> <grade>`.
    pub fn read_trec<R: BufRead>(reader: R, source: &Path) -> Result<Self> {
        let mut q = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(perr(format!("expected 4 fields, found {}", f.len())));
            }
            let grade: i64 = f[3].parse().map_err(|e| perr(format!("bad grade: {e}")))?;
            if grade < 0 {
                return Err(perr(format!("negative grade {grade}")));
            }
            q.insert(f[0], f[2], grade as u32);
        }
        Ok(q)
    }

    pub fn write_trec<W: Write>(&self, mut w: W) -> Result<()> {
        for (qid, docs) in &self.judgments {
            for (doc, grade) in docs {
                writeln!(w, "{qid} 0 {doc} {grade}")?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_trec(std::io::BufReader::new(f), path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Minimum grade counted as relevant for MRR and recall.
    pub relevance_threshold: u32,
    pub mrr_cutoff: Option<usize>,
    pub ndcg_k: usize,
    pub recall_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            relevance_threshold: 1,
            mrr_cutoff: None,
            ndcg_k: 3,
            recall_ks: vec![10, 100],
        }
    }
}

/// Reciprocal rank of the first relevant document, `None` if the query is
/// not judged.
pub fn mrr(run: &RunList, qrels: &Qrels, cutoff: Option<usize>, threshold: u32) -> Option<f64> {
    let judged = qrels.query(&run.query_id)?;
    let limit = cutoff.unwrap_or(usize::MAX);
    Some(
        run.doc_ids()
            .take(limit)
            .position(|d| judged.get(d).is_some_and(|&g| g >= threshold))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64),
    )
}

/// nDCG@k with gain `2^grade - 1` and `log2(rank + 1)` discount.
pub fn ndcg_at_k(run: &RunList, qrels: &Qrels, k: usize) -> Option<f64> {
    let judged = qrels.query(&run.query_id)?;
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let dcg: f64 = run
        .doc_ids()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judged.get(d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        log::warn!(
            "query {} has no positive grades; nDCG set to 0",
            run.query_id
        );
        return Some(0.0);
    }
    Some(dcg / idcg)
}

pub fn recall_at_k(run: &RunList, qrels: &Qrels, k: usize, threshold: u32) -> Option<f64> {
    let judged = qrels.query(&run.query_id)?;
    let relevant = judged.values().filter(|&&g| g >= threshold).count();
    if relevant == 0 {
        return Some(0.0);
    }
    let hit = run
        .doc_ids()
        .take(k)
        .filter(|d| judged.get(*d).is_some_and(|&g| g >= threshold))
        .count();
    Some(hit as f64 / relevant as f64)
}

fn min_max(run: &RunList) -> HashMap<&str, f64> {
    let (lo, hi) = run
        .entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, s)| {
            (lo.min(*s), hi.max(*s))
        });
    if run.entries.is_empty() {
        return HashMap::new();
    }
    if hi == lo {
        log::warn!(
            "run {} for query {} has constant scores; normalized to 1.0",
            run.tag,
            run.query_id
        );
        return run.entries.iter().map(|(d, _)| (d.as_str(), 1.0)).collect();
    }
    run.entries
        .iter()
        .map(|(d, s)| (d.as_str(), (s - lo) / (hi - lo)))
        .collect()
}

/// Average of min-max normalized scores; a document missing from one run
/// contributes 0 for that run.
pub fn fuse(a: &RunList, b: &RunList, tag: &str) -> Result<RunList> {
    if a.query_id != b.query_id {
        return Err(Error::InvalidConfig(format!(
            "cannot fuse runs for different queries ({} vs {})",
            a.query_id, b.query_id
        )));
    }
    let (na, nb) = (min_max(a), min_max(b));
    let mut docs: Vec<&str> = na.keys().chain(nb.keys()).copied().collect();
    docs.sort_unstable();
    docs.dedup();
    let mut entries: Vec<(String, f64)> = docs
        .into_iter()
        .map(|d| {
            let s = (na.get(d).copied().unwrap_or(0.0) + nb.get(d).copied().unwrap_or(0.0)) / 2.0;
            (d.to_string(), s)
        })
        .collect();
    entries.sort_by(rank_order);
    Ok(RunList {
        query_id: a.query_id.clone(),
        entries,
        tag: tag.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub mrr: f64,
    pub ndcg: f64,
    /// Recall keyed by cutoff.
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub queries: usize,
    pub skipped: Vec<String>,
    pub mrr: f64,
    pub ndcg: f64,
    pub recall: BTreeMap<usize, f64>,
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub sparsity_by_depth: Vec<DepthBucket>,
    pub flops: Option<f64>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let ks: Vec<usize> = self.config.recall_ks.clone();
        let recall_cols: Vec<String> = ks.iter().map(|k| format!("recall@{k}")).collect();
        writeln!(
            w,
            "query,mrr,ndcg@{},{}",
            self.config.ndcg_k,
            recall_cols.join(",")
        )?;
        let fmt_row = |name: &str, m: f64, n: f64, r: &BTreeMap<usize, f64>| {
            let rs: Vec<String> = ks.iter().map(|k| r[k].to_string()).collect();
            format!("{name},{m},{n},{}", rs.join(","))
        };
        for (q, m) in &self.per_query {
            writeln!(w, "{}", fmt_row(q, m.mrr, m.ndcg, &m.recall))?;
        }
        writeln!(w, "{}", fmt_row("all", self.mrr, self.ndcg, &self.recall))?;
        Ok(())
    }
}

/// Optional representation statistics attached to a report.
pub struct Encodings<'a> {
    pub queries: &'a [SparseVec],
    pub query_depths: &'a [usize],
    pub docs: &'a [SparseVec],
}

/// Scores every judged query that has at least one positive grade. Judged
/// queries without a run contribute 0 to every metric.
pub fn evaluate(
    runs: &BTreeMap<String, RunList>,
    qrels: &Qrels,
    config: &EvalConfig,
    encodings: Option<Encodings<'_>>,
) -> Result<EvalReport> {
    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    for qid in qrels.queries() {
        let judged = qrels.query(qid).expect("listed query");
        if !judged.values().any(|&g| g >= config.relevance_threshold) {
            log::warn!("query {qid} has no relevant documents; skipped");
            skipped.push(qid.to_string());
            continue;
        }
        let empty = RunList::empty(qid, "missing");
        let run = runs.get(qid).unwrap_or(&empty);
        let metrics = QueryMetrics {
            mrr: mrr(run, qrels, config.mrr_cutoff, config.relevance_threshold).unwrap_or(0.0),
            ndcg: ndcg_at_k(run, qrels, config.ndcg_k).unwrap_or(0.0),
            recall: config
                .recall_ks
                .iter()
                .map(|&k| {
                    (
                        k,
                        recall_at_k(run, qrels, k, config.relevance_threshold).unwrap_or(0.0),
                    )
                })
                .collect(),
        };
        per_query.insert(qid.to_string(), metrics);
    }
    let n = per_query.len();
    let mean = |f: &dyn Fn(&QueryMetrics) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            per_query.values().map(f).sum::<f64>() / n as f64
        }
    };
    let recall = config
        .recall_ks
        .iter()
        .map(|&k| (k, mean(&|m: &QueryMetrics| m.recall[&k])))
        .collect();
    let (sparsity, flops) = match encodings {
        Some(enc) => {
            if enc.queries.len() != enc.query_depths.len() {
                return Err(Error::Shape("one depth per query encoding required".into()));
            }
            let buckets = crate::index::sparsity_by_depth(
                enc.query_depths
                    .iter()
                    .copied()
                    .zip(enc.queries.iter().map(SparseVec::nnz)),
            );
            let flops = if enc.queries.is_empty() || enc.docs.is_empty() {
                None
            } else {
                Some(flops_metric(enc.queries, enc.docs)?)
            };
            (buckets, flops)
        }
        None => (Vec::new(), None),
    };
    Ok(EvalReport {
        config: config.clone(),
        queries: n,
        skipped,
        mrr: mean(&|m| m.mrr),
        ndcg: mean(&|m| m.ndcg),
        recall,
        per_query,
        sparsity_by_depth: sparsity,
        flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(q: &str, docs: &[(&str, f64)]) -> RunList {
        RunList::from_scores(
            q,
            "t",
            docs.iter().map(|(d, s)| (d.to_string(), *s)).collect(),
        )
        .unwrap()
    }

    fn qrels(items: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (a, b, g) in items {
            q.insert(*a, *b, *g);
        }
        q
    }

    #[test]
    fn mrr_cases() {
        let qr = qrels(&[("q", "d1", 1)]);
        assert_eq!(
            mrr(&run("q", &[("d1", 3.0), ("d2", 1.0)]), &qr, None, 1),
            Some(1.0)
        );
        let r = run("q", &[("a", 5.0), ("b", 4.0), ("c", 3.0), ("d1", 2.0)]);
        assert_eq!(mrr(&r, &qr, Some(10), 1), Some(0.25));
        assert_eq!(mrr(&r, &qr, Some(3), 1), Some(0.0));
        assert_eq!(mrr(&run("other", &[]), &qr, None, 1), None);
    }

    #[test]
    fn ndcg_cases() {
        let qr = qrels(&[("q", "a", 2), ("q", "b", 1)]);
        let ideal = run("q", &[("a", 2.0), ("b", 1.0), ("c", 0.5)]);
        assert!((ndcg_at_k(&ideal, &qr, 3).unwrap() - 1.0).abs() < 1e-12);
        let qr1 = qrels(&[("q", "x", 1)]);
        let r = run("q", &[("a", 3.0), ("x", 2.0), ("c", 1.0)]);
        assert!((ndcg_at_k(&r, &qr1, 3).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-12);
        let zero = qrels(&[("q", "x", 0)]);
        assert_eq!(ndcg_at_k(&r, &zero, 3), Some(0.0));
    }

    #[test]
    fn recall_cases() {
        let qr = qrels(&[("q", "a", 1), ("q", "b", 1), ("q", "c", 1), ("q", "d", 1)]);
        let r = run("q", &[("a", 3.0), ("x", 2.0)]);
        assert_eq!(recall_at_k(&r, &qr, 10, 1), Some(0.25));
        let all = run("q", &[("a", 4.0), ("b", 3.0), ("c", 2.0), ("d", 1.0)]);
        assert_eq!(recall_at_k(&all, &qr, 10, 1), Some(1.0));
    }

    #[test]
    fn fusion_hand_example() {
        let a = run("q", &[("d1", 10.0), ("d2", 0.0)]);
        let b = run("q", &[("d2", 5.0), ("d1", 0.0)]);
        let f = fuse(&a, &b, "fusion").unwrap();
        assert_eq!(f.entries, vec![("d1".into(), 0.5), ("d2".into(), 0.5)]);
        assert_eq!(f.tag, "fusion");
    }

    #[test]
    fn fusion_absent_doc_counts_zero() {
        let a = run("q", &[("only_a", 3.0), ("both", 1.0)]);
        let b = run("q", &[("both", 2.0), ("only_b", 1.0)]);
        let f = fuse(&a, &b, "f").unwrap();
        let get = |d: &str| f.entries.iter().find(|e| e.0 == d).unwrap().1;
        assert_eq!(get("only_a"), 0.5);
        assert_eq!(get("both"), 0.5);
        assert_eq!(get("only_b"), 0.0);
    }

    #[test]
    fn fusion_of_constant_run_and_mismatch() {
        let a = run("q", &[("x", 2.0), ("y", 2.0)]);
        let f = fuse(&a, &a, "f").unwrap();
        assert!(f.entries.iter().all(|e| e.1 == 1.0));
        assert!(fuse(&a, &run("other", &[]), "f").is_err());
    }

    #[test]
    fn evaluate_perfect_and_missing() {
        let qr = qrels(&[("q1", "a", 1), ("q2", "b", 1), ("q3", "c", 0)]);
        let runs = BTreeMap::from([("q1".to_string(), run("q1", &[("a", 1.0)]))]);
        let rep = evaluate(&runs, &qr, &EvalConfig::default(), None).unwrap();
        assert_eq!(rep.queries, 2);
        assert_eq!(rep.skipped, vec!["q3".to_string()]);
        assert_eq!(rep.per_query["q1"].mrr, 1.0);
        assert_eq!(rep.per_query["q1"].ndcg, 1.0);
        assert_eq!(rep.per_query["q2"].mrr, 0.0);
        assert_eq!(rep.per_query["q2"].recall[&100], 0.0);
        assert_eq!(rep.mrr, 0.5);
    }

    #[test]
    fn qrels_trec_round_trip() {
        let qr = qrels(&[("q1", "a", 2), ("q1", "b", 0), ("q2", "c", 1)]);
        let mut buf = Vec::new();
        qr.write_trec(&mut buf).unwrap();
        assert_eq!(
            Qrels::read_trec(buf.as_slice(), Path::new("mem")).unwrap(),
            qr
        );
        assert!(Qrels::read_trec("q 0 d -1\n".as_bytes(), Path::new("mem")).is_err());
    }
}
