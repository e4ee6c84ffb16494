//! Retrieval metrics with a single relevant item per query.
//!
//! nDCG uses binary relevance: a query contributes `1 / log2(rank + 1)`
//! when its relevant video is ranked within the top 10, else 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::RankedList;

use super::synth::Qrels;

pub const NDCG_CUTOFF: usize = 10;

/// 1-based rank of each query's relevant video; `None` when it was not
/// retrieved.
fn relevant_ranks(results: &BTreeMap<String, RankedList>, qrels: &Qrels) -> Result<Vec<Option<usize>>> {
    if qrels.is_empty() {
        return Err(Error::Empty("qrels"));
    }
    qrels
        .iter()
        .map(|(q, rel)| {
            let list = results.get(q).ok_or_else(|| Error::MissingQuery(q.clone()))?;
            Ok(list.rank_of(rel))
        })
        .collect()
}

/// Fraction of queries whose relevant video is in the top `k`.
pub fn recall_at_k(results: &BTreeMap<String, RankedList>, qrels: &Qrels, k: usize) -> Result<f64> {
    let ranks = relevant_ranks(results, qrels)?;
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean binary-relevance nDCG@10.
pub fn ndcg_at_10(results: &BTreeMap<String, RankedList>, qrels: &Qrels) -> Result<f64> {
    let ranks = relevant_ranks(results, qrels)?;
    let total: f64 = ranks
        .iter()
        .map(|r| match r {
            Some(r) if *r <= NDCG_CUTOFF => 1.0 / ((*r + 1) as f64).log2(),
            _ => 0.0,
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

/// Median rank of the relevant video (unretrieved counts as list length + 1).
pub fn median_rank(results: &BTreeMap<String, RankedList>, qrels: &Qrels) -> Result<f64> {
    let mut ranks: Vec<usize> = qrels
        .iter()
        .map(|(q, rel)| {
            let list = results.get(q).ok_or_else(|| Error::MissingQuery(q.clone()))?;
            Ok(list.rank_of(rel).unwrap_or(list.len() + 1))
        })
        .collect::<Result<_>>()?;
    if ranks.is_empty() {
        return Err(Error::Empty("qrels"));
    }
    ranks.sort_unstable();
    let n = ranks.len();
    Ok(if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    })
}

/// The metric columns reported for every retrieval run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub ndcg10: f64,
    pub mdr: f64,
}

impl Metrics {
    pub fn compute(results: &BTreeMap<String, RankedList>, qrels: &Qrels) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(results, qrels, 1)?,
            r5: recall_at_k(results, qrels, 5)?,
            r10: recall_at_k(results, qrels, 10)?,
            ndcg10: ndcg_at_10(results, qrels)?,
            mdr: median_rank(results, qrels)?,
        })
    }

    /// Element-wise mean.
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            r1: sum(|m| m.r1),
            r5: sum(|m| m.r5),
            r10: sum(|m| m.r10),
            ndcg10: sum(|m| m.ndcg10),
            mdr: sum(|m| m.mdr),
        }
    }
}
