//! Ranking and likelihood metrics over `(score, label)` pairs.

use crate::training::ce_loss;
use crate::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Rank-sum with average ranks over tied groups.
pub fn auc(scores: &[(f64, u8)]) -> Result<f64> {
    let positives = scores.iter().filter(|s| s.1 == 1).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {positives} positive and {negatives} negative"
        )));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::UndefinedMetric("auc of NaN scores".into()));
    }
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos = sorted[i..j].iter().filter(|s| s.1 == 1).count();
        rank_sum += mean_rank * pos as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// O(m²) pair counting; the reference for [`auc`].
pub fn auc_pairwise(scores: &[(f64, u8)]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1 == 1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| s.1 != 1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Mean clamped binary cross-entropy.
pub fn log_loss(scores: &[(f64, u8)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("log loss of no samples".into()));
    }
    Ok(scores.iter().map(|&(p, y)| ce_loss(p, y)).sum::<f64>() / scores.len() as f64)
}
