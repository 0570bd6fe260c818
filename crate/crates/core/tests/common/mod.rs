#![allow(dead_code)]

use patchprobe::store::{PatchEmbeddingSet, SetMeta, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_set(rng: &mut impl Rng, n: usize, d: usize, variant: Variant) -> PatchEmbeddingSet {
    let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    PatchEmbeddingSet::new(SetMeta::new("doc", "model", variant), n, d, data).unwrap()
}

/// Two sets of the same shape.
pub fn random_pair(rng: &mut impl Rng, n: usize, d: usize) -> (PatchEmbeddingSet, PatchEmbeddingSet) {
    (random_set(rng, n, d, Variant::Reference), random_set(rng, n, d, Variant::Counterfactual))
}

fn cos(u: &[f32], v: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        dot += a as f64 * b as f64;
        nu += a as f64 * a as f64;
        nv += b as f64 * b as f64;
    }
    if nu.sqrt() < 1e-12 || nv.sqrt() < 1e-12 {
        0.0
    } else {
        (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Plain nested loops: mean over rows of `a` of the best cosine against `b`.
pub fn brute_maxsim(a: &PatchEmbeddingSet, b: &PatchEmbeddingSet) -> f64 {
    let mut total = 0.0;
    for i in 0..a.n_patches() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..b.n_patches() {
            best = best.max(cos(a.row(i), b.row(j)));
        }
        total += best;
    }
    total / a.n_patches() as f64
}

const ITEMS: &[&str] = &["REVENUE", "NET INCOME", "MARGIN", "EPS", "ASSETS", "DEBT", "CASH", "EQUITY"];

pub fn random_number(rng: &mut impl Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!("{},{:03}", rng.random_range(1..100), rng.random_range(0..1000)),
        1 => format!("{}.{:02}%", rng.random_range(0..100), rng.random_range(0..100)),
        2 => format!("${}.{}", rng.random_range(0..50), rng.random_range(0..10)),
        _ => format!("-{}", rng.random_range(1..10_000)),
    }
}

/// Header row plus 2..=5 data rows of 2..=4 columns.
pub fn random_table(rng: &mut impl Rng) -> Vec<Vec<String>> {
    let cols = rng.random_range(2..=4);
    let rows = rng.random_range(2..=5);
    let mut cells =
        vec![std::iter::once("ITEM".to_string()).chain((1..cols).map(|c| format!("{}", 2016 + c))).collect::<Vec<_>>()];
    for _ in 0..rows {
        let mut row = vec![ITEMS[rng.random_range(0..ITEMS.len())].to_string()];
        row.extend((1..cols).map(|_| random_number(rng)));
        cells.push(row);
    }
    cells
}
