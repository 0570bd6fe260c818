//! Synthetic embedding sets with closed-form scores.
//!
//! The collapse family models a page as `n` copies of one unit "texture" vector
//! (`e0`) with `change_count` patches rotated by `change_angle` toward `e1`.
//! Optional jitter lives in dimensions `2..d`, orthogonal to the rotation plane,
//! and is shared by both documents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attention::AttentionTriplet;
use crate::store::{PatchEmbeddingSet, SetMeta, Variant};

pub const SYNTH_MODEL: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub d: usize,
    pub change_count: usize,
    pub change_angle: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthParams {
    pub fn new(n: usize, d: usize, change_count: usize, change_angle: f64) -> Self {
        Self { n, d, change_count, change_angle, jitter: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidParams(m));
        if self.change_count < 1 || self.change_count >= self.n {
            return bad(format!("need 1 <= change_count < n, got change_count={} n={}", self.change_count, self.n));
        }
        if self.d < 2 {
            return bad(format!("need d >= 2, got {}", self.d));
        }
        if !self.change_angle.is_finite() {
            return bad("change_angle must be finite".into());
        }
        if !self.jitter.is_finite() || self.jitter < 0.0 {
            return bad(format!("jitter must be finite and >= 0, got {}", self.jitter));
        }
        if self.jitter > 0.0 && self.d < 3 {
            return bad("jitter needs d >= 3 (it lives outside the rotation plane)".into());
        }
        Ok(())
    }
}

/// Original and counterfactual sets; the last `change_count` patches are the changed ones.
pub fn generate_synthetic_pair(
    p: &SynthParams,
    doc_id: &str,
) -> Result<(PatchEmbeddingSet, PatchEmbeddingSet), HarnessError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (n, d) = (p.n, p.d);
    let mut a = vec![0.0f32; n * d];
    for row in a.chunks_exact_mut(d) {
        row[0] = 1.0;
        if p.jitter > 0.0 {
            for x in &mut row[2..] {
                *x = rng.random_range(-p.jitter..=p.jitter) as f32;
            }
        }
    }
    let mut b = a.clone();
    let (sin, cos) = p.change_angle.sin_cos();
    for row in b.chunks_exact_mut(d).skip(n - p.change_count) {
        row[0] = cos as f32;
        row[1] = sin as f32;
    }
    let original = PatchEmbeddingSet::new(SetMeta::new(doc_id, SYNTH_MODEL, Variant::Reference), n, d, a)?;
    let counterfactual = PatchEmbeddingSet::new(SetMeta::new(doc_id, SYNTH_MODEL, Variant::Counterfactual), n, d, b)?;
    Ok((original, counterfactual))
}

/// Exact scores of a zero-jitter collapse pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedScores {
    pub mean: f64,
    pub max: f64,
    pub maxsim_a_to_b: f64,
    pub maxsim_symmetric: f64,
    pub meanpatch: f64,
    pub minpatch: f64,
}

impl ExpectedScores {
    pub fn closed_form(p: &SynthParams) -> Self {
        let n = p.n as f64;
        let c = p.change_count as f64;
        let (sin, cos) = p.change_angle.sin_cos();
        // mean(B) = ((n - c + c cos) e0 + c sin e1) / n, mean(A) = e0
        let along = n - c + c * cos;
        let mean = along / (along * along + (c * sin).powi(2)).sqrt();
        // max(A) = e0; max(B) = e0 + max(0, sin) e1 since unchanged rows keep e0[0] = 1
        let lift = sin.max(0.0);
        let max = 1.0 / (1.0 + lift * lift).sqrt();
        let meanpatch = along / n;
        // every A row finds an unchanged e0 in B; changed B rows match A only at cos
        let maxsim_a_to_b = 1.0;
        let b_to_a = (n - c + c * cos.max(-1.0)) / n;
        Self {
            mean,
            max,
            maxsim_a_to_b,
            maxsim_symmetric: 0.5 * (maxsim_a_to_b + b_to_a),
            meanpatch,
            minpatch: cos.min(1.0),
        }
    }
}

/// Reference / signal / noise sets where a fraction `layout_fraction` of patches is page layout.
///
/// With layout `b = e0`, table `t = e1` and background fill `z = e2`:
/// reference = `p*b + (1-p)*t`, signal = `p*z + (1-p)*t`, noise = `p*b + (1-p)*z`
/// (as patch counts). Mean pooling then gives
/// `sim_to_data = (1-p)^2 / (p^2 + (1-p)^2)` and `sim_to_layout = p^2 / (p^2 + (1-p)^2)`.
pub fn layout_dominated_triplet(
    layout_fraction: f64,
    n: usize,
    d: usize,
    model_id: &str,
    doc_id: &str,
) -> Result<AttentionTriplet, HarnessError> {
    if !(0.0..=1.0).contains(&layout_fraction) {
        return Err(HarnessError::InvalidParams(format!("layout fraction {layout_fraction} not in [0, 1]")));
    }
    if d < 3 || n < 1 {
        return Err(HarnessError::InvalidParams(format!("need n >= 1 and d >= 3, got n={n} d={d}")));
    }
    let layout = (layout_fraction * n as f64).round() as usize;
    let make = |first: usize, second: usize, variant: Variant| {
        let mut data = vec![0.0f32; n * d];
        for (i, row) in data.chunks_exact_mut(d).enumerate() {
            row[if i < layout { first } else { second }] = 1.0;
        }
        PatchEmbeddingSet::new(SetMeta::new(doc_id, model_id, variant), n, d, data)
    };
    let reference = make(0, 1, Variant::Reference)?;
    let signal = make(2, 1, Variant::Signal)?;
    let noise = make(0, 2, Variant::Noise)?;
    Ok(AttentionTriplet::new(reference, signal, noise)?)
}

/// Closed-form mean-pool values `(sim_to_data, sim_to_layout)` for [`layout_dominated_triplet`].
pub fn layout_dominated_mean_pool(layout_fraction: f64) -> (f64, f64) {
    let p = layout_fraction;
    let q = 1.0 - p;
    let den = p * p + q * q;
    (q * q / den, p * p / den)
}

/// Two sets with orthogonal content, standing in for two unrelated natural images.
pub fn natural_analogue_pair(
    n: usize,
    d: usize,
    seed: u64,
) -> Result<(PatchEmbeddingSet, PatchEmbeddingSet), HarnessError> {
    if d < 4 || n < 1 {
        return Err(HarnessError::InvalidParams(format!("need n >= 1 and d >= 4, got n={n} d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = vec![0.0f32; n * d];
    let mut b = vec![0.0f32; n * d];
    // A lives in dims {0, 1}, B in {2, 3}: every cross cosine is exactly 0
    for (ra, rb) in a.chunks_exact_mut(d).zip(b.chunks_exact_mut(d)) {
        ra[0] = rng.random_range(0.5..1.5);
        ra[1] = rng.random_range(-0.5..0.5);
        rb[2] = rng.random_range(0.5..1.5);
        rb[3] = rng.random_range(-0.5..0.5);
    }
    Ok((
        PatchEmbeddingSet::new(SetMeta::new("natural", SYNTH_MODEL, Variant::Reference), n, d, a)?,
        PatchEmbeddingSet::new(SetMeta::new("natural", SYNTH_MODEL, Variant::Counterfactual), n, d, b)?,
    ))
}
