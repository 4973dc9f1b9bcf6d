//! Sparse non-negative vectors over a fixed vocabulary.
//!
//! A [`SparseVec`] stores only strictly positive coordinates, sorted by token
//! id. Every encoder output, document representation and query representation
//! in the crate is one of these.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted sparse `(token-id, weight)` vector of dimension `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSparseVec", into = "RawSparseVec")]
pub struct SparseVec {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

#[derive(Serialize, Deserialize)]
struct RawSparseVec {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl TryFrom<RawSparseVec> for SparseVec {
    type Error = Error;

    fn try_from(raw: RawSparseVec) -> Result<Self> {
        SparseVec::new(raw.dim, raw.entries)
    }
}

impl From<SparseVec> for RawSparseVec {
    fn from(v: SparseVec) -> Self {
        RawSparseVec {
            dim: v.dim,
            entries: v.entries,
        }
    }
}

impl SparseVec {
    /// Validates and wraps already-sorted entries.
    pub fn new(dim: usize, entries: Vec<(u32, f64)>) -> Result<Self> {
        let mut prev: Option<u32> = None;
        for &(id, w) in &entries {
            if id as usize >= dim {
                return Err(Error::TokenOutOfRange { id, size: dim });
            }
            if let Some(p) = prev {
                if id <= p {
                    return Err(Error::Shape(format!(
                        "token ids not strictly increasing ({p} then {id})"
                    )));
                }
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("weight for token {id}")));
            }
            if w <= 0.0 {
                return Err(Error::NegativeWeight {
                    index: id as usize,
                    value: w,
                });
            }
            prev = Some(id);
        }
        Ok(Self { dim, entries })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    /// Keeps exactly the strictly positive coordinates of `values`.
    pub fn from_dense(values: &[f64]) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("dense coordinate {i}")));
            }
            if v < 0.0 {
                return Err(Error::NegativeWeight { index: i, value: v });
            }
            if v > 0.0 {
                entries.push((i as u32, v));
            }
        }
        Ok(Self {
            dim: values.len(),
            entries,
        })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(id, w) in &self.entries {
            out[id as usize] = w;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn get(&self, id: u32) -> f64 {
        match self.entries.binary_search_by_key(&id, |&(t, _)| t) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    /// Merge-join dot product over shared token ids.
    pub fn dot(&self, other: &SparseVec) -> Result<f64> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0f64;
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(acc)
    }

    /// Dot product against a dense vector of the same dimension.
    pub fn dot_dense(&self, dense: &[f64]) -> Result<f64> {
        if self.dim != dense.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: dense.len(),
            });
        }
        Ok(self
            .entries
            .iter()
            .map(|&(id, w)| w * dense[id as usize])
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sv(dim: usize, e: &[(u32, f64)]) -> SparseVec {
        SparseVec::new(dim, e.to_vec()).unwrap()
    }

    #[test]
    fn dot_small_cases() {
        assert_eq!(sv(5, &[]).dot(&sv(5, &[(3, 4.0)])).unwrap(), 0.0);
        let a = sv(5, &[(1, 2.0), (3, 1.0)]);
        let b = sv(5, &[(3, 4.0)]);
        assert_eq!(a.dot(&b).unwrap(), 4.0);
        assert_eq!(b.dot(&a).unwrap(), 4.0);
    }

    #[test]
    fn dot_rejects_mismatched_dims() {
        let err = sv(4, &[]).dot(&sv(5, &[])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    fn random_sparse(rng: &mut ChaCha8Rng, dim: usize, nnz: usize) -> SparseVec {
        let mut ids = rand::seq::index::sample(rng, dim, nnz).into_vec();
        ids.sort_unstable();
        let entries = ids
            .into_iter()
            .map(|i| (i as u32, rng.gen_range(0.01..3.0)))
            .collect();
        SparseVec::new(dim, entries).unwrap()
    }

    #[test]
    fn dot_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = random_sparse(&mut rng, 1000, 50);
            let b = random_sparse(&mut rng, 1000, 50);
            let (da, db) = (a.to_dense(), b.to_dense());
            let oracle: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
            let got = a.dot(&b).unwrap();
            assert!((got - oracle).abs() <= 1e-6 * oracle.abs().max(1e-12));
            assert_eq!(got, b.dot(&a).unwrap());
        }
    }

    #[test]
    fn nnz_counts_entries() {
        assert_eq!(sv(8, &[]).nnz(), 0);
        assert_eq!(sv(8, &[(0, 1.0), (5, 0.2)]).nnz(), 2);
    }

    #[test]
    fn from_dense_cases() {
        assert!(SparseVec::from_dense(&[0.0, 0.0, 0.0]).unwrap().is_empty());
        let v = SparseVec::from_dense(&[0.0, 2.5, 0.0, 1.0]).unwrap();
        assert_eq!(v.entries(), &[(1, 2.5), (3, 1.0)]);
        assert!(matches!(
            SparseVec::from_dense(&[0.0, -1.0]),
            Err(Error::NegativeWeight { index: 1, .. })
        ));
    }

    #[test]
    fn new_rejects_invalid_entries() {
        assert!(SparseVec::new(3, vec![(1, 1.0), (1, 2.0)]).is_err());
        assert!(SparseVec::new(3, vec![(2, 1.0), (1, 2.0)]).is_err());
        assert!(SparseVec::new(3, vec![(0, 0.0)]).is_err());
        assert!(SparseVec::new(3, vec![(3, 1.0)]).is_err());
    }

    #[test]
    fn serde_validates() {
        let v = sv(6, &[(0, 0.5), (4, 1.25)]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<SparseVec>(&s).unwrap(), v);
        assert!(serde_json::from_str::<SparseVec>(r#"{"dim":2,"entries":[[5,1.0]]}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn dense_round_trip(dense in prop::collection::vec(
            prop_oneof![Just(0.0f64), 0.001f64..100.0], 1..64)) {
            let v = SparseVec::from_dense(&dense).unwrap();
            prop_assert_eq!(v.to_dense(), dense.clone());
            prop_assert_eq!(SparseVec::from_dense(&v.to_dense()).unwrap(), v.clone());
            prop_assert!(v.nnz() <= v.dim());
        }

        #[test]
        fn dot_is_commutative(a in prop::collection::vec(prop_oneof![Just(0.0f64), 0.0f64..5.0], 32),
                              b in prop::collection::vec(prop_oneof![Just(0.0f64), 0.0f64..5.0], 32)) {
            let a = SparseVec::from_dense(&a).unwrap();
            let b = SparseVec::from_dense(&b).unwrap();
            prop_assert_eq!(a.dot(&b).unwrap(), b.dot(&a).unwrap());
            prop_assert!(a.dot(&b).unwrap() >= 0.0);
        }
    }
}
