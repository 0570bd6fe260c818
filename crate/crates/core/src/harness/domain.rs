//! Natural-image pair vs financial-document pair under mean pooling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::{read_jsonl, DocumentPair};
use super::HarnessError;
use crate::similarity::{mean_pool_score, ScoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainComparison {
    pub comparison_id: String,
    pub model_id: String,
    pub natural: f64,
    pub financial: f64,
    /// `financial - natural`; large when document pairs look alike while natural pairs do not.
    pub gap: f64,
}

pub fn compare_domains(
    comparison_id: &str,
    natural: &DocumentPair,
    financial: &DocumentPair,
) -> Result<DomainComparison, ScoreError> {
    let nat = mean_pool_score(&natural.original, &natural.counterfactual)?.value;
    let fin = mean_pool_score(&financial.original, &financial.counterfactual)?.value;
    Ok(DomainComparison {
        comparison_id: comparison_id.to_string(),
        model_id: financial.model_id.clone(),
        natural: nat,
        financial: fin,
        gap: fin - nat,
    })
}

/// One line of a domain-comparison manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainManifestEntry {
    pub comparison_id: String,
    pub model_id: String,
    pub natural_a: PathBuf,
    pub natural_b: PathBuf,
    pub financial_a: PathBuf,
    pub financial_b: PathBuf,
}

pub fn read_domain_manifest(path: &Path) -> Result<Vec<DomainManifestEntry>, HarnessError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<DomainManifestEntry> = read_jsonl(path)?;
    for e in &mut entries {
        for p in [&mut e.natural_a, &mut e.natural_b, &mut e.financial_a, &mut e.financial_b] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(entries)
}
