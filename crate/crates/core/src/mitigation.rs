//! Alternative aggregations that try to down-weight repetitive background patches.
//!
//! * VarWgt: weight each patch by the variance of its components.
//! * AttnGd: weight each patch by the spread of its cosine similarities to the other patches.
//! * TopK-R: drop the `k` most similar aligned pairs, mean-pool what is left.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{self, kernel::NormalizedRows, ScoreError};
use crate::store::PatchEmbeddingSet;

/// Removal count used when none is given.
pub const DEFAULT_K: usize = 50;

const SPREAD_EPS: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "varwgt")]
    VarWgt,
    #[serde(rename = "attngd")]
    AttnGd,
    #[serde(rename = "topkr")]
    TopKR,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::VarWgt, Strategy::AttnGd, Strategy::TopKR];

    pub fn key(self) -> &'static str {
        match self {
            Strategy::VarWgt => "varwgt",
            Strategy::AttnGd => "attngd",
            Strategy::TopKR => "topkr",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::VarWgt => "VarWgt",
            Strategy::AttnGd => "AttnGd",
            Strategy::TopKR => "TopK-R",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected one of varwgt,attngd,topkr)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MitigationError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("attention weights need at least 2 patches, got {0}")]
    TooFewPatches(usize),
    #[error("weight vector has {weights} entries for a set of {patches} patches")]
    WeightLength { weights: usize, patches: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Variance,
    Attention,
    UniformFallback,
}

/// A probability vector over the patches of one set.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeights {
    pub weights: Vec<f64>,
    pub source: WeightSource,
}

impl PatchWeights {
    pub fn uniform(n: usize) -> Self {
        Self { weights: vec![1.0 / n as f64; n], source: WeightSource::UniformFallback }
    }

    fn normalized(raw: Vec<f64>, source: WeightSource) -> Self {
        let max = raw.iter().copied().fold(0.0f64, f64::max);
        if max < SPREAD_EPS {
            return Self::uniform(raw.len());
        }
        let total = similarity::pairwise_sum(&raw);
        Self { weights: raw.into_iter().map(|w| w / total).collect(), source }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weights proportional to each row's population variance across dimensions.
pub fn variance_weights(set: &PatchEmbeddingSet) -> PatchWeights {
    let d = set.dim() as f64;
    let raw = set
        .rows()
        .map(|row| {
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d;
            row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d
        })
        .collect();
    PatchWeights::normalized(raw, WeightSource::Variance)
}

/// Weights proportional to the standard deviation of each patch's off-diagonal
/// row in the self-similarity matrix.
pub fn attention_weights(set: &PatchEmbeddingSet) -> Result<PatchWeights, MitigationError> {
    let n = set.n_patches();
    if n < 2 {
        return Err(MitigationError::TooFewPatches(n));
    }
    let rows = NormalizedRows::new(set);
    // Welford accumulators per row; identical inputs give an exact zero spread
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); n];
    fn push(slot: &mut (usize, f64, f64), x: f64) {
        slot.0 += 1;
        let delta = x - slot.1;
        slot.1 += delta / slot.0 as f64;
        slot.2 += delta * (x - slot.1);
    }
    for i in 0..n {
        let u = rows.row(i);
        for j in (i + 1)..n {
            let c: f64 = u.iter().zip(rows.row(j)).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
            push(&mut acc[i], c);
            push(&mut acc[j], c);
        }
    }
    let raw = acc.iter().map(|&(count, _, m2)| (m2 / count as f64).max(0.0).sqrt()).collect();
    Ok(PatchWeights::normalized(raw, WeightSource::Attention))
}

fn weighted_sum(set: &PatchEmbeddingSet, w: &PatchWeights) -> Result<Vec<f64>, MitigationError> {
    if w.len() != set.n_patches() {
        return Err(MitigationError::WeightLength { weights: w.len(), patches: set.n_patches() });
    }
    let mut acc = vec![0.0f64; set.dim()];
    for (row, &wi) in set.rows().zip(&w.weights) {
        if wi == 0.0 {
            continue;
        }
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += wi * x as f64;
        }
    }
    Ok(acc)
}

/// Cosine of the two weighted means.
pub fn weighted_mean_score(
    a: &PatchEmbeddingSet,
    b: &PatchEmbeddingSet,
    wa: &PatchWeights,
    wb: &PatchWeights,
) -> Result<f64, MitigationError> {
    if a.dim() != b.dim() {
        return Err(ScoreError::DimMismatch(a.dim(), b.dim()).into());
    }
    let pa = weighted_sum(a, wa)?;
    let pb = weighted_sum(b, wb)?;
    similarity::cosine_f64(&pa, &pb).ok_or(MitigationError::Score(ScoreError::DegenerateMean))
}

/// Indices removed by TopK-R: the `min(k, n-1)` highest aligned cosines,
/// ties going to the lower index. Returned in removal order.
pub fn topk_removed_indices(
    a: &PatchEmbeddingSet,
    b: &PatchEmbeddingSet,
    k: usize,
) -> Result<Vec<usize>, MitigationError> {
    let (sims, _) = similarity::aligned_cosines(a, b)?;
    let k = k.min(sims.len() - 1);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]).then(i.cmp(&j)));
    order.truncate(k);
    Ok(order)
}

pub fn topk_removal_score(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet, k: usize) -> Result<f64, MitigationError> {
    let removed = topk_removed_indices(a, b, k)?;
    let mut keep = vec![true; a.n_patches()];
    for i in removed {
        keep[i] = false;
    }
    let pa = similarity::pooled_mean(a, Some(&keep));
    let pb = similarity::pooled_mean(b, Some(&keep));
    similarity::cosine_f64(&pa, &pb).ok_or(MitigationError::Score(ScoreError::DegenerateMean))
}

/// Scores a pair with one strategy; `k` only matters for TopK-R.
pub fn score_strategy(
    a: &PatchEmbeddingSet,
    b: &PatchEmbeddingSet,
    strategy: Strategy,
    k: usize,
) -> Result<f64, MitigationError> {
    match strategy {
        Strategy::VarWgt => weighted_mean_score(a, b, &variance_weights(a), &variance_weights(b)),
        Strategy::AttnGd => weighted_mean_score(a, b, &attention_weights(a)?, &attention_weights(b)?),
        Strategy::TopKR => topk_removal_score(a, b, k),
    }
}
