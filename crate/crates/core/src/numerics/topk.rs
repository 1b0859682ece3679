use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredIndex<S> {
    pub index: usize,
    pub score: S,
}

/// Descending by score, ascending by index on ties.
#[inline]
fn rank_order<S: Real>(scores: &[S], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` highest scores, best first. Ties go to the smaller index,
/// so the result is always a prefix of the stable descending sort.
pub fn topk_indices<S: Real>(scores: &[S], k: usize) -> Vec<usize> {
    assert!(k >= 1, "topk_indices requires k >= 1");
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx
}

pub fn topk_scored<S: Real>(scores: &[S], k: usize) -> Vec<ScoredIndex<S>> {
    topk_indices(scores, k)
        .into_iter()
        .map(|index| ScoredIndex {
            index,
            score: scores[index],
        })
        .collect()
}
