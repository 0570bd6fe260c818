//! Layout-versus-data bias from reference / signal / noise triplets.
//!
//! The signal image keeps only the table, the noise image keeps only the page
//! template. Comparing both against the reference shows which of the two the
//! scoring mechanism is dominated by: `gap = sim_to_layout - sim_to_data`, so a
//! positive gap means layout dominance.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{self, Direction, Mechanism, ScoreError};
use crate::store::{PatchEmbeddingSet, Variant};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),
    #[error("no gaps to summarize")]
    EmptyInput,
    #[error("triplet manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct AttentionTriplet {
    reference: PatchEmbeddingSet,
    signal: PatchEmbeddingSet,
    noise: PatchEmbeddingSet,
}

impl AttentionTriplet {
    pub fn new(
        reference: PatchEmbeddingSet,
        signal: PatchEmbeddingSet,
        noise: PatchEmbeddingSet,
    ) -> Result<Self, AttentionError> {
        let bad = |m: String| Err(AttentionError::InvalidTriplet(m));
        for (set, want) in [(&reference, Variant::Reference), (&signal, Variant::Signal), (&noise, Variant::Noise)] {
            if set.variant() != want {
                return bad(format!("expected a {want} set, got {}", set.variant()));
            }
        }
        if signal.dim() != reference.dim() || noise.dim() != reference.dim() {
            return bad(format!(
                "dims differ: reference {}, signal {}, noise {}",
                reference.dim(),
                signal.dim(),
                noise.dim()
            ));
        }
        for other in [&signal, &noise] {
            if other.model_id() != reference.model_id() || other.doc_id() != reference.doc_id() {
                return bad(format!(
                    "{} set belongs to {}/{}, reference to {}/{}",
                    other.variant(),
                    other.model_id(),
                    other.doc_id(),
                    reference.model_id(),
                    reference.doc_id()
                ));
            }
        }
        Ok(Self { reference, signal, noise })
    }

    pub fn reference(&self) -> &PatchEmbeddingSet {
        &self.reference
    }

    pub fn signal(&self) -> &PatchEmbeddingSet {
        &self.signal
    }

    pub fn noise(&self) -> &PatchEmbeddingSet {
        &self.noise
    }

    /// The same triplet with the signal and noise matrices exchanged.
    pub fn with_roles_swapped(self) -> Self {
        Self {
            reference: self.reference,
            signal: self.noise.with_variant(Variant::Signal),
            noise: self.signal.with_variant(Variant::Noise),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGap {
    pub mechanism: Mechanism,
    /// Reference vs signal (table only).
    pub sim_to_data: f64,
    /// Reference vs noise (template only).
    pub sim_to_layout: f64,
    pub gap: f64,
}

pub fn attention_gap(
    t: &AttentionTriplet,
    mechanism: Mechanism,
    direction: Direction,
) -> Result<AttentionGap, AttentionError> {
    let sim_to_data = similarity::score(&t.reference, &t.signal, mechanism, direction)?.value;
    let sim_to_layout = similarity::score(&t.reference, &t.noise, mechanism, direction)?.value;
    Ok(AttentionGap { mechanism, sim_to_data, sim_to_layout, gap: sim_to_layout - sim_to_data })
}

/// A gap tagged with the grouping keys used by [`summarize_gaps`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub doc_id: String,
    pub model_id: String,
    pub dataset: String,
    #[serde(flatten)]
    pub gap: AttentionGap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSummaryRow {
    pub model_id: String,
    pub dataset: String,
    pub mechanism: Mechanism,
    pub sim_to_data: f64,
    pub sim_to_layout: f64,
    pub gap: f64,
    pub count: usize,
}

/// Per (model, dataset, mechanism) arithmetic means, in that sort order.
pub fn summarize_gaps(records: &[GapRecord]) -> Result<Vec<GapSummaryRow>, AttentionError> {
    if records.is_empty() {
        return Err(AttentionError::EmptyInput);
    }
    let mut groups: BTreeMap<(&str, &str, Mechanism), Vec<&AttentionGap>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.model_id, &r.dataset, r.gap.mechanism)).or_default().push(&r.gap);
    }
    Ok(groups
        .into_iter()
        .map(|((model, dataset, mechanism), gaps)| {
            let n = gaps.len() as f64;
            let mean = |f: fn(&AttentionGap) -> f64| {
                similarity::pairwise_sum(&gaps.iter().map(|g| f(g)).collect::<Vec<_>>()) / n
            };
            GapSummaryRow {
                model_id: model.to_string(),
                dataset: dataset.to_string(),
                mechanism,
                sim_to_data: mean(|g| g.sim_to_data),
                sim_to_layout: mean(|g| g.sim_to_layout),
                gap: mean(|g| g.gap),
                count: gaps.len(),
            }
        })
        .collect())
}

/// One line of a triplet manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletManifestEntry {
    pub doc_id: String,
    pub model_id: String,
    pub reference_path: PathBuf,
    pub signal_path: PathBuf,
    pub noise_path: PathBuf,
    pub dataset: String,
}

impl TripletManifestEntry {
    pub fn resolved(mut self, base: &Path) -> Self {
        for p in [&mut self.reference_path, &mut self.signal_path, &mut self.noise_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }
}

pub fn read_triplet_manifest(path: &Path) -> Result<Vec<TripletManifestEntry>, AttentionError> {
    let err = |message: String| AttentionError::Manifest { path: path.to_path_buf(), message };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TripletManifestEntry =
            serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        out.push(entry.resolved(base));
    }
    Ok(out)
}
