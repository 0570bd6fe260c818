//! The five document-pair scoring mechanisms.
//!
//! Two single-vector aggregations (mean and max pooling) and three patch-level
//! comparisons (MaxSim, MeanPatch, MinPatch). Every score is a cosine in `[-1, 1]`
//! computed with `f64` accumulation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::PatchEmbeddingSet;

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "mean")]
    MeanPool,
    #[serde(rename = "max")]
    MaxPool,
    #[serde(rename = "maxsim")]
    MaxSim,
    #[serde(rename = "meanpatch")]
    MeanPatch,
    #[serde(rename = "minpatch")]
    MinPatch,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] =
        [Mechanism::MeanPool, Mechanism::MaxPool, Mechanism::MaxSim, Mechanism::MeanPatch, Mechanism::MinPatch];

    /// Short key used on the command line and in record files.
    pub fn key(self) -> &'static str {
        match self {
            Mechanism::MeanPool => "mean",
            Mechanism::MaxPool => "max",
            Mechanism::MaxSim => "maxsim",
            Mechanism::MeanPatch => "meanpatch",
            Mechanism::MinPatch => "minpatch",
        }
    }

    /// Column label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::MeanPool => "Mean",
            Mechanism::MaxPool => "Max",
            Mechanism::MaxSim => "MaxSim",
            Mechanism::MeanPatch => "MeanP",
            Mechanism::MinPatch => "MinP",
        }
    }

    /// Whether the mechanism compares patch `i` of one set with patch `i` of the other.
    pub fn needs_alignment(self) -> bool {
        matches!(self, Mechanism::MeanPatch | Mechanism::MinPatch)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| format!("unknown mechanism {s:?} (expected one of mean,max,maxsim,meanpatch,minpatch)"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Average over A's patches of their best match in B.
    #[default]
    AToB,
    /// Mean of the A-to-B and B-to-A scores.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("embedding dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("patch counts differ: {0} vs {1}")]
    PatchCountMismatch(usize, usize),
    #[error("mean-pooled vector has zero norm")]
    DegenerateMean,
    #[error("max-pooled vector has zero norm")]
    DegenerateMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismScore {
    pub mechanism: Mechanism,
    pub value: f64,
    /// Only set for MaxSim.
    pub direction: Option<Direction>,
    /// Number of zero-norm rows encountered (their cosines were taken as 0).
    pub degenerate_rows: usize,
    /// Patch with the lowest aligned cosine (MinPatch only).
    pub argmin: Option<usize>,
}

impl MechanismScore {
    fn plain(mechanism: Mechanism, value: f64) -> Self {
        Self { mechanism, value: clamp_unit(value), direction: None, degenerate_rows: 0, argmin: None }
    }
}

#[inline]
fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

#[inline]
fn dot_f32(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[inline]
fn dot_f64(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity plus a flag set when either norm is below [`NORM_EPS`] (value is then 0).
pub fn cosine_flagged(u: &[f32], v: &[f32]) -> (f64, bool) {
    debug_assert_eq!(u.len(), v.len());
    let nu = dot_f32(u, u).sqrt();
    let nv = dot_f32(v, v).sqrt();
    if nu < NORM_EPS || nv < NORM_EPS {
        return (0.0, true);
    }
    (clamp_unit(dot_f32(u, v) / (nu * nv)), false)
}

/// Cosine similarity with 64-bit accumulation. Degenerate inputs give 0.0.
pub fn cosine(u: &[f32], v: &[f32]) -> f64 {
    cosine_flagged(u, v).0
}

pub(crate) fn cosine_f64(u: &[f64], v: &[f64]) -> Option<f64> {
    let nu = dot_f64(u, u).sqrt();
    let nv = dot_f64(v, v).sqrt();
    if nu < NORM_EPS || nv < NORM_EPS {
        None
    } else {
        Some(clamp_unit(dot_f64(u, v) / (nu * nv)))
    }
}

/// Pairwise (tree) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 16;
    if xs.len() <= BASE {
        xs.iter().sum()
    } else {
        let (l, r) = xs.split_at(xs.len() / 2);
        pairwise_sum(l) + pairwise_sum(r)
    }
}

fn check_dims(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> Result<(), ScoreError> {
    if a.dim() != b.dim() {
        return Err(ScoreError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

fn check_aligned(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> Result<(), ScoreError> {
    if a.n_patches() != b.n_patches() {
        return Err(ScoreError::PatchCountMismatch(a.n_patches(), b.n_patches()));
    }
    check_dims(a, b)
}

/// Arithmetic mean of the rows selected by `keep` (all rows when `None`).
pub(crate) fn pooled_mean(set: &PatchEmbeddingSet, keep: Option<&[bool]>) -> Vec<f64> {
    let mut acc = vec![0.0f64; set.dim()];
    let mut count = 0usize;
    for (i, row) in set.rows().enumerate() {
        if keep.is_some_and(|k| !k[i]) {
            continue;
        }
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x as f64;
        }
        count += 1;
    }
    let inv = 1.0 / count.max(1) as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

pub(crate) fn pooled_max(set: &PatchEmbeddingSet) -> Vec<f64> {
    let mut acc = vec![f64::NEG_INFINITY; set.dim()];
    for row in set.rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a = a.max(x as f64);
        }
    }
    acc
}

pub fn mean_pool_score(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> Result<MechanismScore, ScoreError> {
    check_dims(a, b)?;
    let value = cosine_f64(&pooled_mean(a, None), &pooled_mean(b, None)).ok_or(ScoreError::DegenerateMean)?;
    Ok(MechanismScore::plain(Mechanism::MeanPool, value))
}

/// Cosine of the per-dimension maxima over signed values.
pub fn max_pool_score(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> Result<MechanismScore, ScoreError> {
    check_dims(a, b)?;
    let value = cosine_f64(&pooled_max(a), &pooled_max(b)).ok_or(ScoreError::DegenerateMax)?;
    Ok(MechanismScore::plain(Mechanism::MaxPool, value))
}

pub fn maxsim_score(
    a: &PatchEmbeddingSet,
    b: &PatchEmbeddingSet,
    direction: Direction,
) -> Result<MechanismScore, ScoreError> {
    check_dims(a, b)?;
    let na = kernel::NormalizedRows::new(a);
    let nb = kernel::NormalizedRows::new(b);
    let (row_best, col_best) = kernel::best_matches(&na, &nb, direction == Direction::Symmetric);
    let a_to_b = pairwise_sum(&row_best) / row_best.len() as f64;
    let value = match direction {
        Direction::AToB => a_to_b,
        Direction::Symmetric => {
            let b_to_a = pairwise_sum(&col_best) / col_best.len() as f64;
            0.5 * (a_to_b + b_to_a)
        }
    };
    Ok(MechanismScore {
        mechanism: Mechanism::MaxSim,
        value: clamp_unit(value),
        direction: Some(direction),
        degenerate_rows: na.degenerate + nb.degenerate,
        argmin: None,
    })
}

/// Cosines between spatially aligned patches, plus the count of degenerate pairs.
pub fn aligned_cosines(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> Result<(Vec<f64>, usize), ScoreError> {
    check_aligned(a, b)?;
    let mut degenerate = 0;
    let sims = a
        .rows()
        .zip(b.rows())
        .map(|(u, v)| {
            let (c, flag) = cosine_flagged(u, v);
            degenerate += flag as usize;
            c
        })
        .collect();
    Ok((sims, degenerate))
}

pub fn meanpatch_score(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> Result<MechanismScore, ScoreError> {
    let (sims, degenerate_rows) = aligned_cosines(a, b)?;
    let value = pairwise_sum(&sims) / sims.len() as f64;
    Ok(MechanismScore { degenerate_rows, ..MechanismScore::plain(Mechanism::MeanPatch, value) })
}

pub fn minpatch_score(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> Result<MechanismScore, ScoreError> {
    let (sims, degenerate_rows) = aligned_cosines(a, b)?;
    let (idx, &value) = sims
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1).then(x.0.cmp(&y.0)))
        .expect("sets have at least one patch");
    Ok(MechanismScore { degenerate_rows, argmin: Some(idx), ..MechanismScore::plain(Mechanism::MinPatch, value) })
}

pub fn score(
    a: &PatchEmbeddingSet,
    b: &PatchEmbeddingSet,
    mechanism: Mechanism,
    direction: Direction,
) -> Result<MechanismScore, ScoreError> {
    match mechanism {
        Mechanism::MeanPool => mean_pool_score(a, b),
        Mechanism::MaxPool => max_pool_score(a, b),
        Mechanism::MaxSim => maxsim_score(a, b, direction),
        Mechanism::MeanPatch => meanpatch_score(a, b),
        Mechanism::MinPatch => minpatch_score(a, b),
    }
}

/// Scores every requested mechanism. Failures are kept per entry.
pub fn score_all(
    a: &PatchEmbeddingSet,
    b: &PatchEmbeddingSet,
    mechanisms: &[Mechanism],
    direction: Direction,
) -> BTreeMap<Mechanism, Result<MechanismScore, ScoreError>> {
    mechanisms.iter().map(|&m| (m, score(a, b, m, direction))).collect()
}

/// Blocked MaxSim kernel over pre-normalized rows.
pub mod kernel {
    use super::{dot_f32, NORM_EPS};
    use crate::store::PatchEmbeddingSet;

    const BLOCK_A: usize = 8;
    const BLOCK_B: usize = 32;

    /// Row-major unit rows in `f64`; zero-norm rows are stored as zeros.
    pub struct NormalizedRows {
        pub data: Vec<f64>,
        pub n: usize,
        pub dim: usize,
        pub degenerate: usize,
    }

    impl NormalizedRows {
        pub fn new(set: &PatchEmbeddingSet) -> Self {
            let dim = set.dim();
            let mut data = Vec::with_capacity(set.n_patches() * dim);
            let mut degenerate = 0;
            for row in set.rows() {
                let norm = dot_f32(row, row).sqrt();
                if norm < NORM_EPS {
                    degenerate += 1;
                    data.extend(std::iter::repeat_n(0.0, dim));
                } else {
                    let inv = 1.0 / norm;
                    data.extend(row.iter().map(|&x| x as f64 * inv));
                }
            }
            Self { data, n: set.n_patches(), dim, degenerate }
        }

        #[inline]
        pub fn row(&self, i: usize) -> &[f64] {
            &self.data[i * self.dim..(i + 1) * self.dim]
        }
    }

    #[inline]
    fn dot4(u: &[f64], v: &[f64]) -> f64 {
        let mut acc = [0.0f64; 4];
        let mut cu = u.chunks_exact(4);
        let mut cv = v.chunks_exact(4);
        for (x, y) in (&mut cu).zip(&mut cv) {
            acc[0] += x[0] * y[0];
            acc[1] += x[1] * y[1];
            acc[2] += x[2] * y[2];
            acc[3] += x[3] * y[3];
        }
        let tail: f64 = cu.remainder().iter().zip(cv.remainder()).map(|(x, y)| x * y).sum();
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    /// Per-row maxima of the cosine matrix (`a` rows vs `b` rows).
    /// Column maxima are tracked too when `with_cols` is set; otherwise the second vector is empty.
    pub fn best_matches(a: &NormalizedRows, b: &NormalizedRows, with_cols: bool) -> (Vec<f64>, Vec<f64>) {
        let mut row_best = vec![f64::NEG_INFINITY; a.n];
        let mut col_best = if with_cols { vec![f64::NEG_INFINITY; b.n] } else { Vec::new() };
        let mut tile = [[0.0f64; BLOCK_B]; BLOCK_A];

        for i0 in (0..a.n).step_by(BLOCK_A) {
            let i1 = (i0 + BLOCK_A).min(a.n);
            for j0 in (0..b.n).step_by(BLOCK_B) {
                let j1 = (j0 + BLOCK_B).min(b.n);
                for (ti, i) in (i0..i1).enumerate() {
                    let u = a.row(i);
                    for (tj, j) in (j0..j1).enumerate() {
                        tile[ti][tj] = dot4(u, b.row(j));
                    }
                }
                for (ti, i) in (i0..i1).enumerate() {
                    let best = tile[ti][..j1 - j0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row_best[i] = row_best[i].max(best);
                }
                if with_cols {
                    for (tj, j) in (j0..j1).enumerate() {
                        let best = tile[..i1 - i0].iter().map(|r| r[tj]).fold(f64::NEG_INFINITY, f64::max);
                        col_best[j] = col_best[j].max(best);
                    }
                }
            }
        }
        row_best.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        col_best.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        (row_best, col_best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{SetMeta, Variant};

    fn set(rows: &[Vec<f32>]) -> PatchEmbeddingSet {
        PatchEmbeddingSet::from_rows(SetMeta::new("d", "m", Variant::Reference), rows).unwrap()
    }

    fn e(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn collapse_pair(n: usize) -> (PatchEmbeddingSet, PatchEmbeddingSet) {
        let a: Vec<_> = (0..n).map(|_| e(0, 4)).collect();
        let mut b = a.clone();
        b[n - 1] = e(1, 4);
        (set(&a), set(&b))
    }

    // Nested-loop reference used only by tests.
    fn brute_maxsim(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> f64 {
        let mut total = 0.0;
        for u in a.rows() {
            let mut best = f64::NEG_INFINITY;
            for v in b.rows() {
                best = best.max(cosine(u, v));
            }
            total += best;
        }
        total / a.n_patches() as f64
    }

    #[test]
    fn cosine_basics() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&e(0, 3), &e(1, 3)), 0.0);
        assert_eq!(cosine_flagged(&[0.0, 0.0], &[1.0, 0.0]), (0.0, true));
    }

    #[test]
    fn mean_pool_collapse_closed_form() {
        let (a, b) = collapse_pair(100);
        let s = mean_pool_score(&a, &b).unwrap().value;
        let expected = 99.0 / (9802.0f64).sqrt();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        assert!(s > 0.99994 && s < 0.99996);
    }

    #[test]
    fn mean_pool_opposite() {
        let s = mean_pool_score(&set(&[e(0, 2)]), &set(&[vec![-1.0, 0.0]])).unwrap();
        assert!((s.value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_degenerate() {
        let a = set(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(mean_pool_score(&a, &a), Err(ScoreError::DegenerateMean));
    }

    #[test]
    fn max_pool_collapse_and_permutation() {
        let (a, b) = collapse_pair(100);
        let s = max_pool_score(&a, &b).unwrap().value;
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

        let rows: Vec<Vec<f32>> = vec![vec![1.0, -2.0, 0.5], vec![0.1, 0.2, 3.0], vec![-1.0, 4.0, 0.0]];
        let mut rev = rows.clone();
        rev.reverse();
        let s = max_pool_score(&set(&rows), &set(&rev)).unwrap().value;
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maxsim_blind_to_single_change() {
        let (a, b) = collapse_pair(100);
        let s = maxsim_score(&a, &b, Direction::AToB).unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.direction, Some(Direction::AToB));
        // the changed B patch can only match at 0, so the reverse direction sees it
        let sym = maxsim_score(&a, &b, Direction::Symmetric).unwrap().value;
        assert!((sym - (1.0 + 0.99) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn maxsim_odd_sizes_match_brute_force() {
        // sizes that leave partial tiles in both dimensions
        let a: Vec<Vec<f32>> = (0..13).map(|i| (0..7).map(|k| ((i * 7 + k) as f32 * 0.37).sin()).collect()).collect();
        let b: Vec<Vec<f32>> = (0..37).map(|i| (0..7).map(|k| ((i * 5 + k) as f32 * 0.91).cos()).collect()).collect();
        let (a, b) = (set(&a), set(&b));
        let fast = maxsim_score(&a, &b, Direction::AToB).unwrap().value;
        assert!((fast - brute_maxsim(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn maxsim_zero_rows_count_as_degenerate() {
        let a = set(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let b = set(&[vec![1.0, 0.0]]);
        let s = maxsim_score(&a, &b, Direction::AToB).unwrap();
        assert_eq!(s.degenerate_rows, 1);
        assert!((s.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn meanpatch_alignment() {
        let (a, b) = collapse_pair(100);
        assert!((meanpatch_score(&a, &b).unwrap().value - 0.99).abs() < 1e-12);

        let rows: Vec<Vec<f32>> = (0..4).map(|i| e(i, 4)).collect();
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(meanpatch_score(&set(&rows), &set(&rev)).unwrap().value, 0.0);
    }

    #[test]
    fn minpatch_finds_change() {
        let (a, b) = collapse_pair(100);
        let s = minpatch_score(&a, &b).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.argmin, Some(99));
        let s = minpatch_score(&set(&[e(0, 2)]), &set(&[vec![-1.0, 0.0]])).unwrap();
        assert!((s.value + 1.0).abs() < 1e-12);
        assert_eq!(minpatch_score(&a, &a).unwrap().value, 1.0);
    }

    #[test]
    fn score_all_collapse_pair() {
        let (a, b) = collapse_pair(100);
        let out = score_all(&a, &b, &Mechanism::ALL, Direction::AToB);
        let v = |m| out[&m].as_ref().unwrap().value;
        assert!((v(Mechanism::MeanPool) - 0.99995).abs() < 1e-5);
        assert!((v(Mechanism::MaxPool) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert_eq!(v(Mechanism::MaxSim), 1.0);
        assert!((v(Mechanism::MeanPatch) - 0.99).abs() < 1e-12);
        assert_eq!(v(Mechanism::MinPatch), 0.0);
    }

    #[test]
    fn score_all_skips_alignment_on_count_mismatch() {
        let a = set(&(0..4).map(|i| e(i % 3, 3)).collect::<Vec<_>>());
        let b = set(&(0..5).map(|i| e(i % 3, 3)).collect::<Vec<_>>());
        let out = score_all(&a, &b, &[Mechanism::MeanPatch, Mechanism::MaxSim], Direction::AToB);
        assert_eq!(out[&Mechanism::MeanPatch], Err(ScoreError::PatchCountMismatch(4, 5)));
        assert!(out[&Mechanism::MaxSim].is_ok());
    }

    #[test]
    fn dim_mismatch_everywhere() {
        let a = set(&[e(0, 2)]);
        let b = set(&[e(0, 3)]);
        for m in Mechanism::ALL {
            assert_eq!(score(&a, &b, m, Direction::AToB), Err(ScoreError::DimMismatch(2, 3)));
        }
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sqrt()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn mechanism_keys_roundtrip() {
        for m in Mechanism::ALL {
            assert_eq!(m.key().parse::<Mechanism>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.key()));
        }
        assert!("median".parse::<Mechanism>().is_err());
    }
}
