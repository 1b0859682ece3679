//! Ranking metrics and the log loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties counted
/// as one half (Mann-Whitney U over average ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", scores.len(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gauc {
    pub value: f64,
    pub users_used: usize,
    /// Users with a single label class, left out of the average.
    pub users_excluded: usize,
}

/// Sample-count-weighted mean of per-user AUC.
pub fn gauc(users: &[u32], scores: &[f64], labels: &[u8]) -> Result<Gauc> {
    if users.len() != scores.len() || users.len() != labels.len() {
        return Err(Error::shape("gauc", users.len(), scores.len().min(labels.len())));
    }
    let mut by_user: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&u, &s), &l) in users.iter().zip(scores).zip(labels) {
        let e = by_user.entry(u).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    let (mut num, mut den) = (0.0, 0.0);
    let (mut used, mut excluded) = (0, 0);
    for (s, l) in by_user.values() {
        let pos = l.iter().filter(|&&x| x == 1).count();
        if pos == 0 || pos == l.len() {
            excluded += 1;
            continue;
        }
        let n = l.len() as f64;
        num += n * auc(s, l)?;
        den += n;
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("gauc: no user has both classes"));
    }
    Ok(Gauc {
        value: num / den,
        users_used: used,
        users_excluded: excluded,
    })
}

pub const PROB_CLAMP: f64 = 1e-12;

/// Mean negative log-likelihood, plus how many predictions had to be clamped
/// away from 0 or 1.
pub fn log_loss(pred: &[f64], labels: &[u8]) -> Result<(f64, usize)> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::shape("log_loss", pred.len(), labels.len()));
    }
    let mut clamped = 0;
    let total: f64 = pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if c != p {
                clamped += 1;
            }
            if y == 1 {
                -c.ln()
            } else {
                -(1.0 - c).ln()
            }
        })
        .sum();
    Ok((total / pred.len() as f64, clamped))
}
