//! Exact inverted-index retrieval over sparse document representations.
//!
//! Scoring is term-at-a-time into a dense accumulator, with no pruning, so
//! results are identical to brute-force dot products. Ties are broken by
//! ascending external document id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIndex", into = "RawIndex")]
pub struct InvertedIndex {
    dim: usize,
    postings: Vec<Vec<(u32, f64)>>,
    ext_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawIndex {
    dim: usize,
    ext_ids: Vec<String>,
    postings: Vec<Vec<(u32, f64)>>,
}

impl From<InvertedIndex> for RawIndex {
    fn from(i: InvertedIndex) -> Self {
        RawIndex {
            dim: i.dim,
            ext_ids: i.ext_ids,
            postings: i.postings,
        }
    }
}

impl TryFrom<RawIndex> for InvertedIndex {
    type Error = Error;

    fn try_from(raw: RawIndex) -> Result<Self> {
        if raw.postings.len() != raw.dim {
            return Err(Error::Shape(format!(
                "index has {} posting lists for dimension {}",
                raw.postings.len(),
                raw.dim
            )));
        }
        let n = raw.ext_ids.len();
        for list in &raw.postings {
            for w in list.windows(2) {
                if w[0].0 >= w[1].0 {
                    return Err(Error::Shape("posting list not sorted by doc id".into()));
                }
            }
            for &(d, wt) in list {
                if d as usize >= n || !(wt > 0.0 && wt.is_finite()) {
                    return Err(Error::Shape(format!("invalid posting ({d}, {wt})")));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &raw.ext_ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(InvertedIndex {
            dim: raw.dim,
            postings: raw.postings,
            ext_ids: raw.ext_ids,
        })
    }
}

impl InvertedIndex {
    pub fn build<I, S>(dim: usize, docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, SparseVec)>,
        S: Into<String>,
    {
        let mut postings = vec![Vec::new(); dim];
        let mut ext_ids = Vec::new();
        let mut seen = HashMap::new();
        for (ext, vec) in docs {
            let ext = ext.into();
            if vec.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: vec.dim(),
                });
            }
            if seen.insert(ext.clone(), ()).is_some() {
                return Err(Error::DuplicateId(ext));
            }
            let doc = ext_ids.len() as u32;
            for &(t, w) in vec.entries() {
                postings[t as usize].push((doc, w));
            }
            ext_ids.push(ext);
        }
        Ok(Self {
            dim,
            postings,
            ext_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_count(&self) -> usize {
        self.ext_ids.len()
    }

    pub fn ext_ids(&self) -> &[String] {
        &self.ext_ids
    }

    pub fn posting_list(&self, token: u32) -> &[(u32, f64)] {
        self.postings
            .get(token as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Rebuilds the per-document vectors, in internal id order.
    pub fn doc_vectors(&self) -> Vec<(String, SparseVec)> {
        let mut entries: Vec<Vec<(u32, f64)>> = vec![Vec::new(); self.ext_ids.len()];
        for (t, list) in self.postings.iter().enumerate() {
            for &(d, w) in list {
                entries[d as usize].push((t as u32, w));
            }
        }
        self.ext_ids
            .iter()
            .cloned()
            .zip(entries)
            .map(|(id, e)| {
                (
                    id,
                    SparseVec::new(self.dim, e).expect("postings are validated"),
                )
            })
            .collect()
    }

    pub fn total_postings(&self) -> usize {
        self.postings.iter().map(Vec::len).sum()
    }

    /// Exact top-`k` by dot product. Documents with zero score are omitted.
    pub fn search(
        &self,
        query_id: &str,
        query: &SparseVec,
        k: usize,
        tag: &str,
    ) -> Result<RunList> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let scores = self.score_all(query);
        let mut hits: Vec<(u32, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0.0)
            .map(|(d, s)| (d as u32, s))
            .collect();
        let cmp = |a: &(u32, f64), b: &(u32, f64)| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.ext_ids[a.0 as usize].cmp(&self.ext_ids[b.0 as usize]))
        };
        if k == 0 {
            hits.clear();
        } else if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_by(cmp);
        Ok(RunList {
            query_id: query_id.to_string(),
            entries: hits
                .into_iter()
                .map(|(d, s)| (self.ext_ids[d as usize].clone(), s))
                .collect(),
            tag: tag.to_string(),
        })
    }

    /// Dot product of `query` with every document, indexed by internal id.
    pub fn score_all(&self, query: &SparseVec) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.ext_ids.len()];
        for &(t, qw) in query.entries() {
            for &(d, dw) in self.posting_list(t) {
                acc[d as usize] += qw * dw;
            }
        }
        acc
    }
}

/// Ranked results for one query: score descending, ties by ascending doc id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
    pub tag: String,
}

pub(crate) fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl RunList {
    /// Sorts arbitrary `(doc, score)` pairs into a valid run.
    pub fn from_scores(
        query_id: impl Into<String>,
        tag: impl Into<String>,
        mut entries: Vec<(String, f64)>,
    ) -> Result<Self> {
        if let Some((d, _)) = entries.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score for document {d}")));
        }
        entries.sort_by(rank_order);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateId(w[0].0.clone()));
            }
        }
        Ok(Self {
            query_id: query_id.into(),
            entries,
            tag: tag.into(),
        })
    }

    pub fn empty(query_id: impl Into<String>, tag: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            entries: Vec::new(),
            tag: tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }
}

/// Writes runs in TREC format: `<qid> Q0 <docid> <rank> <score> <tag>`.
pub fn write_trec<'a, W, I>(mut w: W, runs: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a RunList>,
{
    for run in runs {
        for (rank, (doc, score)) in run.entries.iter().enumerate() {
            writeln!(
                w,
                "{} Q0 {} {} {} {}",
                run.query_id,
                doc,
                rank + 1,
                score,
                run.tag
            )?;
        }
    }
    Ok(())
}

/// Reads a TREC run file into one [`RunList`] per query id.
pub fn read_trec<R: BufRead>(
    reader: R,
    source: &std::path::Path,
) -> Result<BTreeMap<String, RunList>> {
    type Rows = BTreeMap<String, (String, Vec<(usize, String, f64)>)>;
    let mut rows = Rows::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(perr(format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|e| perr(format!("bad rank: {e}")))?;
        let score: f64 = f[4].parse().map_err(|e| perr(format!("bad score: {e}")))?;
        let entry = rows
            .entry(f[0].to_string())
            .or_insert_with(|| (f[5].to_string(), Vec::new()));
        entry.1.push((rank, f[2].to_string(), score));
    }
    let mut out = BTreeMap::new();
    for (qid, (tag, mut list)) in rows {
        list.sort_by_key(|r| r.0);
        let entries = list.into_iter().map(|(_, d, s)| (d, s)).collect();
        out.insert(qid.clone(), RunList::from_scores(qid, tag, entries)?);
    }
    Ok(out)
}

/// Expected scoring cost between a query and a document in the index:
/// `sum_j p_j(q) p_j(d)` with `p_j` the fraction of vectors activating `j`.
pub fn flops_metric(queries: &[SparseVec], docs: &[SparseVec]) -> Result<f64> {
    if queries.is_empty() || docs.is_empty() {
        return Err(Error::Degenerate(
            "FLOPs needs non-empty query and document sets".into(),
        ));
    }
    let dim = queries[0].dim();
    let freq = |set: &[SparseVec]| -> Result<Vec<f64>> {
        let mut counts = vec![0usize; dim];
        for v in set {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            for &(t, _) in v.entries() {
                counts[t as usize] += 1;
            }
        }
        let n = set.len() as f64;
        Ok(counts.into_iter().map(|c| c as f64 / n).collect())
    };
    let pq = freq(queries)?;
    let pd = freq(docs)?;
    Ok(pq.iter().zip(&pd).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBucket {
    pub depth: usize,
    pub mean_nnz: f64,
    pub count: usize,
}

/// Mean number of activated tokens per conversation depth.
pub fn sparsity_by_depth<I>(items: I) -> Vec<DepthBucket>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (depth, nnz) in items {
        let e = acc.entry(depth).or_default();
        e.0 += nnz;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(depth, (sum, count))| DepthBucket {
            depth,
            mean_nnz: sum as f64 / count as f64,
            count,
        })
        .collect()
}
