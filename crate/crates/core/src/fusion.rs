//! Deterministic rankings and rank fusion.
//!
//! Rankings sort by descending score with ties broken by ascending id, so
//! identical inputs always give identical lists.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default reciprocal-rank-fusion constant.
pub const DEFAULT_RRF_K: f64 = 60.0;

/// Ordered `(id, score)` pairs, best first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    entries: Vec<(String, f64)>,
}

fn order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

impl RankedList {
    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|(x, _)| x == id).map(|p| p + 1)
    }

    /// Keeps the first `k` entries.
    pub fn truncate(mut self, k: usize) -> Self {
        self.entries.truncate(k);
        self
    }

    fn id_set(&self) -> BTreeSet<&str> {
        self.ids().collect()
    }
}

/// Sorts `(id, score)` pairs into a [`RankedList`]. NaN scores and repeated
/// ids are rejected.
pub fn rank<I, S>(scores: I) -> Result<RankedList>
where
    I: IntoIterator<Item = (S, f64)>,
    S: Into<String>,
{
    let mut entries: Vec<(String, f64)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (id, s) in scores {
        let id = id.into();
        if s.is_nan() {
            return Err(Error::NonFinite(format!("score for `{id}` is NaN")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        entries.push((id, s));
    }
    entries.sort_by(order);
    Ok(RankedList { entries })
}

/// Reciprocal rank fusion: `score(d) = Σ_r 1 / (k + rank_r(d))` with 1-based
/// ranks. Every input must rank the same set of ids.
pub fn rrf_fuse(rankings: &[RankedList], k: f64) -> Result<RankedList> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("RRF constant must be positive, got {k}")));
    }
    let Some(first) = rankings.first() else {
        return Err(Error::Empty("rrf_fuse rankings"));
    };
    let ids = first.id_set();
    let mut fused: BTreeMap<&str, f64> = ids.iter().map(|&id| (id, 0.0)).collect();
    for (r, list) in rankings.iter().enumerate() {
        if list.id_set() != ids {
            return Err(Error::InconsistentIds(format!(
                "ranking {r} covers a different id set than ranking 0"
            )));
        }
        for (pos, (id, _)) in list.entries.iter().enumerate() {
            *fused.get_mut(id.as_str()).expect("id set checked") += 1.0 / (k + (pos + 1) as f64);
        }
    }
    rank(fused.into_iter().map(|(id, s)| (id.to_string(), s)))
}

/// Ranks by the elementwise sum of several score maps over the same ids.
pub fn sum_fuse(score_maps: &[BTreeMap<String, f64>]) -> Result<RankedList> {
    let Some(first) = score_maps.first() else {
        return Err(Error::Empty("sum_fuse score maps"));
    };
    let mut total = first.clone();
    for (i, m) in score_maps.iter().enumerate().skip(1) {
        if m.len() != total.len() || m.keys().any(|k| !total.contains_key(k)) {
            return Err(Error::InconsistentIds(format!(
                "score map {i} covers a different id set than map 0"
            )));
        }
        for (k, v) in m {
            *total.get_mut(k).expect("key checked") += v;
        }
    }
    rank(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(l: &RankedList) -> Vec<&str> {
        l.ids().collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(ids(&rank([("a", 0.3), ("b", 0.9)]).unwrap()), ["b", "a"]);
        assert_eq!(ids(&rank([("b", 0.5), ("a", 0.5)]).unwrap()), ["a", "b"]);
        assert_eq!(ids(&rank([("x", -1.0)]).unwrap()), ["x"]);
        assert!(rank([("a", f64::NAN)]).is_err());
        assert!(rank([("a", 1.0), ("a", 2.0)]).is_err());
    }

    #[test]
    fn rrf_hand_example() {
        let r1 = rank([("A", 3.0), ("B", 2.0), ("C", 1.0)]).unwrap();
        let r2 = rank([("C", 3.0), ("A", 2.0), ("B", 1.0)]).unwrap();
        let fused = rrf_fuse(&[r1.clone(), r2], 60.0).unwrap();
        assert_eq!(ids(&fused), ["A", "C", "B"]);
        let expect = [1.0 / 61.0 + 1.0 / 62.0, 1.0 / 63.0 + 1.0 / 61.0, 1.0 / 62.0 + 1.0 / 63.0];
        for ((_, s), e) in fused.entries().iter().zip(expect) {
            assert!((s - e).abs() < 1e-15);
        }
        assert!((fused.entries()[0].1 - 0.032522).abs() < 5e-7);
        assert!((fused.entries()[1].1 - 0.032266).abs() < 5e-7);
        assert!((fused.entries()[2].1 - 0.032002).abs() < 5e-7);

        assert_eq!(ids(&rrf_fuse(&[r1.clone()], 60.0).unwrap()), ids(&r1));
        assert_eq!(ids(&rrf_fuse(&[r1.clone(), r1.clone(), r1.clone()], 60.0).unwrap()), ids(&r1));
    }

    #[test]
    fn rrf_rejects_bad_input() {
        let r1 = rank([("A", 1.0), ("B", 0.0)]).unwrap();
        let r2 = rank([("A", 1.0), ("C", 0.0)]).unwrap();
        assert!(matches!(rrf_fuse(&[r1.clone(), r2], 60.0), Err(Error::InconsistentIds(_))));
        assert!(rrf_fuse(&[r1], 0.0).is_err());
        assert!(rrf_fuse(&[], 60.0).is_err());
    }

    #[test]
    fn sum_fuse_examples() {
        let a: BTreeMap<String, f64> = [("x".into(), 0.2), ("y".into(), 0.7), ("z".into(), 0.1)].into();
        let zero: BTreeMap<String, f64> = a.keys().map(|k| (k.clone(), 0.0)).collect();
        assert_eq!(ids(&sum_fuse(&[a.clone(), zero]).unwrap()), ids(&rank(a.clone()).unwrap()));

        let p: BTreeMap<String, f64> = [("x".into(), 1.0), ("y".into(), 2.0), ("z".into(), 3.0)].into();
        let q: BTreeMap<String, f64> = [("x".into(), 3.0), ("y".into(), 2.0), ("z".into(), 1.0)].into();
        let tied = sum_fuse(&[p, q]).unwrap();
        assert_eq!(ids(&tied), ["x", "y", "z"]);
        assert!(tied.entries().iter().all(|(_, s)| *s == 4.0));

        let mut missing = a.clone();
        missing.remove("x");
        assert!(sum_fuse(&[a, missing]).is_err());
    }
}
