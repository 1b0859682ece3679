//! General search units: pick ~100 finalists out of a long behavior sequence.
//!
//! The consistency-preserved unit ranks behaviors with the very relevance
//! function the exact-search attention uses, so with fresh keys it returns
//! exactly what that attention considers most relevant. The SIM baselines rank
//! by category match or by pre-trained embedding similarity instead.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{relevance_scores, Keys, RelevanceScores, TwinParams};
use crate::error::{Error, Result};
use crate::features::EmbeddingTable;
use crate::numerics::{dot, topk_indices, Matrix};
use crate::scalar::Real;

pub const DEFAULT_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GsuKind {
    TwinCp,
    SimHard,
    SimSoft,
    Oracle,
}

impl GsuKind {
    pub const ALL: [GsuKind; 4] = [GsuKind::TwinCp, GsuKind::SimHard, GsuKind::SimSoft, GsuKind::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            GsuKind::TwinCp => "twin-cp",
            GsuKind::SimHard => "sim-hard",
            GsuKind::SimSoft => "sim-soft",
            GsuKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for GsuKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GsuKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GsuKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown GSU kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<S> {
    /// Unique behavior positions, in selection order.
    pub indices: Vec<usize>,
    pub per_head_scores: RelevanceScores<S>,
    /// For each selected index, the heads whose ranking reached it.
    pub provenance: Vec<Vec<usize>>,
}

/// Where CP-GSU takes the inherent keys from.
#[derive(Debug, Clone, Copy)]
pub enum KeySource<'a, S> {
    /// Raw `K_h`, projected with the supplied parameters.
    Fresh(&'a Matrix<S>),
    /// One `K_h W^h` matrix per head, e.g. gathered from a projection cache.
    Projected(&'a [Matrix<S>]),
}

/// Fixed-order round-robin over heads: each turn a head contributes its best
/// not-yet-selected behavior, until `k` unique behaviors are collected.
pub fn round_robin_union<S: Real>(per_head: &[Vec<S>], k: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let l = per_head.first().map_or(0, Vec::len);
    let want = k.min(l);
    if want == 0 {
        return (Vec::new(), Vec::new());
    }
    // a head can only walk over entries that end up selected, so its top-`want`
    // prefix is all it will ever consume
    let rankings: Vec<Vec<usize>> = per_head.iter().map(|s| topk_indices(s, want)).collect();
    let mut cursor = vec![0usize; rankings.len()];
    let mut slot_of = vec![usize::MAX; l];
    let mut indices = Vec::with_capacity(want);
    let mut provenance: Vec<Vec<usize>> = Vec::with_capacity(want);
    'outer: while indices.len() < want {
        for (h, ranking) in rankings.iter().enumerate() {
            while let Some(&i) = ranking.get(cursor[h]) {
                cursor[h] += 1;
                if slot_of[i] == usize::MAX {
                    slot_of[i] = indices.len();
                    indices.push(i);
                    provenance.push(vec![h]);
                    break;
                }
                provenance[slot_of[i]].push(h);
            }
            if indices.len() == want {
                break 'outer;
            }
        }
    }
    (indices, provenance)
}

/// CP-GSU selection from per-head scores: all behaviors in first-head order
/// when `L <= k`, the round-robin union otherwise.
pub fn select_indices<S: Real>(per_head: &[Vec<S>], k: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let l = per_head.first().map_or(0, Vec::len);
    if l <= k {
        let all = topk_indices(&per_head[0], l.max(1));
        let prov = vec![(0..per_head.len()).collect::<Vec<_>>(); all.len()];
        (all, prov)
    } else {
        round_robin_union(per_head, k)
    }
}

fn select_by_scores<S: Real>(scores: RelevanceScores<S>, k: usize) -> RetrievalResult<S> {
    let (indices, provenance) = select_indices(&scores.per_head, k);
    RetrievalResult {
        indices,
        per_head_scores: scores,
        provenance,
    }
}

/// Relevance under every head for the given key source.
pub fn score_all_heads<S: Real>(
    q: &[S],
    keys: KeySource<'_, S>,
    kc: &Matrix<S>,
    params: &TwinParams<S>,
) -> Result<RelevanceScores<S>> {
    if kc.rows() == 0 {
        return Err(Error::invalid("retrieval over an empty behavior sequence"));
    }
    if let KeySource::Projected(p) = keys {
        if p.len() != params.heads.len() {
            return Err(Error::shape("score_all_heads", params.heads.len(), p.len()));
        }
    }
    let per_head = params
        .heads
        .iter()
        .enumerate()
        .map(|(a, head)| {
            let keys = match keys {
                KeySource::Fresh(kh) => Keys::Inherent(kh),
                KeySource::Projected(p) => Keys::Projected(&p[a]),
            };
            relevance_scores(q, keys, kc, head)
        })
        .collect::<Result<_>>()?;
    Ok(RelevanceScores { per_head })
}

/// Consistency-preserved retrieval: top-`k` by the attention's own relevance.
/// When `L <= k` every behavior is returned, ordered by the first head.
pub fn cp_gsu_retrieve<S: Real>(
    q: &[S],
    keys: KeySource<'_, S>,
    kc: &Matrix<S>,
    params: &TwinParams<S>,
    k: usize,
) -> Result<RetrievalResult<S>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(select_by_scores(score_all_heads(q, keys, kc, params)?, k))
}

/// "The real top-k": the exact-search parameters applied to the whole sequence
/// with freshly projected keys.
pub fn oracle_topk<S: Real>(
    q: &[S],
    kh: &Matrix<S>,
    kc: &Matrix<S>,
    esu_params: &TwinParams<S>,
    k: usize,
) -> Result<RetrievalResult<S>> {
    cp_gsu_retrieve(q, KeySource::Fresh(kh), kc, esu_params, k)
}

/// Full category-match ranking: matches most recent first, then everything else
/// most recent first. Equal timestamps go to the later position.
pub fn hard_gsu_ranking(target_category: u32, categories: &[u32], times: &[f64]) -> Vec<usize> {
    debug_assert_eq!(categories.len(), times.len());
    let mut order: Vec<usize> = (0..categories.len()).collect();
    order.sort_by(|&a, &b| {
        let ma = categories[a] == target_category;
        let mb = categories[b] == target_category;
        mb.cmp(&ma)
            .then(times[b].total_cmp(&times[a]))
            .then(b.cmp(&a))
    });
    order
}

/// SIM Hard: same-category behaviors, most recent first, padded with the most
/// recent off-category behaviors when fewer than `k` match.
pub fn hard_gsu<S: Real>(
    target_category: u32,
    categories: &[u32],
    times: &[f64],
    k: usize,
) -> Result<RetrievalResult<S>> {
    if categories.len() != times.len() {
        return Err(Error::shape("hard_gsu", categories.len(), times.len()));
    }
    let mut ranking = hard_gsu_ranking(target_category, categories, times);
    ranking.truncate(k);
    let scores = categories
        .iter()
        .map(|&c| if c == target_category { S::one() } else { S::zero() })
        .collect();
    Ok(RetrievalResult {
        provenance: vec![vec![0]; ranking.len()],
        indices: ranking,
        per_head_scores: RelevanceScores { per_head: vec![scores] },
    })
}

/// Inner products of pre-trained video embeddings between target and behaviors.
pub fn soft_gsu_scores<S: Real>(
    target_video: u64,
    behavior_videos: &[u64],
    pretrained: &EmbeddingTable<S>,
) -> Result<Vec<S>> {
    let lookup = |id: u64| -> Result<&[S]> {
        if id as usize >= pretrained.vocab() {
            return Err(Error::invalid(format!(
                "video {id} has no pre-trained embedding (vocab {})",
                pretrained.vocab()
            )));
        }
        Ok(pretrained.column(id as usize))
    };
    let t = lookup(target_video)?;
    behavior_videos
        .iter()
        .map(|&v| Ok(dot(t, lookup(v)?)))
        .collect()
}

/// SIM Soft: top-`k` by pre-trained embedding inner product.
pub fn soft_gsu<S: Real>(
    target_video: u64,
    behavior_videos: &[u64],
    pretrained: &EmbeddingTable<S>,
    k: usize,
) -> Result<RetrievalResult<S>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let scores = soft_gsu_scores(target_video, behavior_videos, pretrained)?;
    let indices = topk_indices(&scores, k);
    Ok(RetrievalResult {
        provenance: vec![vec![0]; indices.len()],
        indices,
        per_head_scores: RelevanceScores { per_head: vec![scores] },
    })
}

/// `|candidate ∩ oracle| / |oracle|`.
pub fn hit_rate(candidate: &[usize], oracle: &[usize]) -> f64 {
    if oracle.is_empty() {
        return 1.0;
    }
    let set: HashSet<usize> = candidate.iter().copied().collect();
    oracle.iter().filter(|i| set.contains(i)).count() as f64 / oracle.len() as f64
}

/// One (user, target) case for a hit-rate curve: the method's full ranking of
/// the sequence (its top-n is the first n entries) and the oracle's set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveCase {
    pub ranking: Vec<usize>,
    pub oracle: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub hit_rate: f64,
    pub stderr: f64,
    pub cases: usize,
}

/// Mean hit rate of each method's top-`n` against the oracle set, per `n`.
pub fn hit_rate_curve(n_values: &[usize], cases: &[CurveCase]) -> Result<Vec<CurvePoint>> {
    if n_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("n_values must be sorted ascending"));
    }
    Ok(n_values
        .iter()
        .map(|&n| {
            let rates: Vec<f64> = cases
                .iter()
                .map(|c| hit_rate(&c.ranking[..n.min(c.ranking.len())], &c.oracle))
                .collect();
            let (mean, stderr) = mean_stderr(&rates);
            CurvePoint {
                n,
                hit_rate: mean,
                stderr,
                cases: rates.len(),
            }
        })
        .collect())
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
