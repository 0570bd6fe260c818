//! Aggregate tables in CSV and Markdown.
//!
//! Cells are arithmetic means over the pairs (or triplets) in each block, printed
//! with four decimals. Counts of excluded inputs, skipped scores and degenerate
//! rows go into a footer block after the table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::bench::{
    read_jsonl, FailureRecord, PairCondition, ScoreRecord, TaskKind, DOMAIN_FILE, FAILURES_FILE, GAPS_FILE,
    RECORDS_FILE,
};
use super::domain::DomainComparison;
use super::HarnessError;
use crate::attention::{summarize_gaps, GapRecord};
use crate::mitigation::Strategy;
use crate::similarity::{pairwise_sum, Mechanism};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layout {
    Sensitivity,
    Mitigation,
    Attention,
    Domain,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::Sensitivity, Layout::Mitigation, Layout::Attention, Layout::Domain];

    pub fn key(self) -> &'static str {
        match self {
            Layout::Sensitivity => "sensitivity",
            Layout::Mitigation => "mitigation",
            Layout::Attention => "attention",
            Layout::Domain => "domain",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Layout::ALL
            .into_iter()
            .find(|l| l.key() == s)
            .ok_or_else(|| format!("unknown layout {s:?} (expected sensitivity, mitigation, attention or domain)"))
    }
}

/// Everything a report can be built from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportInputs {
    pub records: Vec<ScoreRecord>,
    pub gaps: Vec<GapRecord>,
    pub domains: Vec<DomainComparison>,
    pub failures: Vec<FailureRecord>,
}

/// Loads whichever record files exist in a results directory.
pub fn load_report_inputs(dir: &Path) -> Result<ReportInputs, HarnessError> {
    fn opt<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<Vec<T>, HarnessError> {
        let p = dir.join(name);
        if p.exists() {
            read_jsonl(&p)
        } else {
            Ok(Vec::new())
        }
    }
    if !dir.is_dir() {
        return Err(HarnessError::InvalidInput(format!("{} is not a directory", dir.display())));
    }
    Ok(ReportInputs {
        records: opt(dir, RECORDS_FILE)?,
        gaps: opt(dir, GAPS_FILE)?,
        domains: opt(dir, DOMAIN_FILE)?,
        failures: opt(dir, FAILURES_FILE)?,
    })
}

/// Four decimals; negative zero prints as zero.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    /// Leading non-numeric columns.
    pub label_columns: usize,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub footer: Vec<(String, String)>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let line = |cells: &[String]| cells.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",");
        out.push_str(&line(&self.header));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        for (k, v) in &self.footer {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        out.push_str(&line(&self.header));
        let align: Vec<String> =
            (0..self.header.len()).map(|i| if i < self.label_columns { "---".into() } else { "---:".into() }).collect();
        out.push_str(&line(&align));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        if !self.footer.is_empty() {
            out.push('\n');
            for (k, v) in &self.footer {
                out.push_str(&format!("- {k}: {v}\n"));
            }
        }
        out
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| pairwise_sum(xs) / xs.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_default()
}

/// `(key, label)` columns of a score layout, in fixed order, restricted to those present.
fn score_columns(records: &[ScoreRecord], layout: Layout) -> Vec<(&'static str, &'static str)> {
    let all: Vec<(&str, &str)> = match layout {
        Layout::Sensitivity => Mechanism::ALL.iter().map(|m| (m.key(), m.label())).collect(),
        Layout::Mitigation => Strategy::ALL.iter().map(|s| (s.key(), s.label())).collect(),
        _ => Vec::new(),
    };
    all.into_iter()
        .filter(|(k, _)| records.iter().any(|r| r.scores.contains_key(*k) || r.skipped.contains_key(*k)))
        .collect()
}

pub fn has_content(inputs: &ReportInputs, layout: Layout) -> bool {
    match layout {
        Layout::Sensitivity | Layout::Mitigation => !score_columns(&inputs.records, layout).is_empty(),
        Layout::Attention => !inputs.gaps.is_empty(),
        Layout::Domain => !inputs.domains.is_empty(),
    }
}

fn excluded(failures: &[FailureRecord], task: TaskKind) -> usize {
    failures.iter().filter(|f| f.task == task).count()
}

/// One row per (condition, model), one column per score per dataset.
fn score_table(inputs: &ReportInputs, layout: Layout) -> Result<Table, HarnessError> {
    let columns = score_columns(&inputs.records, layout);
    if columns.is_empty() {
        return Err(HarnessError::EmptyInput(layout.to_string()));
    }
    let keys: BTreeSet<&str> = columns.iter().map(|(k, _)| *k).collect();
    let records: Vec<&ScoreRecord> = inputs
        .records
        .iter()
        .filter(|r| keys.iter().any(|k| r.scores.contains_key(*k) || r.skipped.contains_key(*k)))
        .collect();
    let datasets: BTreeSet<&str> = records.iter().map(|r| r.dataset.as_str()).collect();

    let mut blocks: BTreeMap<(PairCondition, &str), BTreeMap<&str, Vec<&ScoreRecord>>> = BTreeMap::new();
    for r in &records {
        blocks.entry((r.condition, &r.model_id)).or_default().entry(&r.dataset).or_default().push(r);
    }

    let mut header = vec!["condition".to_string(), "model".to_string()];
    for ds in &datasets {
        header.extend(columns.iter().map(|(_, label)| format!("{ds}:{label}")));
    }
    let rows = blocks
        .iter()
        .map(|((condition, model), by_ds)| {
            let mut row = vec![condition.to_string(), model.to_string()];
            for ds in &datasets {
                let recs = by_ds.get(ds).map(Vec::as_slice).unwrap_or(&[]);
                for (key, _) in &columns {
                    let vals: Vec<f64> = recs.iter().filter_map(|r| r.scores.get(*key).copied()).collect();
                    row.push(cell(mean(&vals)));
                }
            }
            row
        })
        .collect();

    let skipped: usize = records.iter().map(|r| r.skipped.keys().filter(|k| keys.contains(k.as_str())).count()).sum();
    let degenerate: usize = records
        .iter()
        .map(|r| r.degenerate_flags.iter().filter(|f| f.split(':').next().is_some_and(|k| keys.contains(k))).count())
        .sum();
    let mut footer = vec![
        ("pairs_included".to_string(), records.len().to_string()),
        ("pairs_excluded".to_string(), excluded(&inputs.failures, TaskKind::Pair).to_string()),
        ("skipped_scores".to_string(), skipped.to_string()),
        ("degenerate_flags".to_string(), degenerate.to_string()),
    ];
    match layout {
        Layout::Sensitivity if keys.contains("maxsim") => {
            let dirs: BTreeSet<String> = records
                .iter()
                .filter_map(|r| r.maxsim_direction)
                .map(|d| serde_json::to_value(d).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                .collect();
            let dir = if dirs.len() == 1 { dirs.into_iter().next().unwrap_or_default() } else { "mixed".into() };
            footer.push(("maxsim_direction".into(), dir));
        }
        Layout::Mitigation if keys.contains("topkr") => {
            let ks: BTreeSet<usize> = records.iter().filter_map(|r| r.topk_k).collect();
            let k = ks.iter().map(usize::to_string).collect::<Vec<_>>().join("/");
            footer.push(("topk_k".into(), k));
        }
        _ => {}
    }
    Ok(Table { label_columns: 2, header, rows, footer })
}

/// One row per (model, mechanism), three columns per dataset.
fn attention_table(inputs: &ReportInputs) -> Result<Table, HarnessError> {
    let summary = summarize_gaps(&inputs.gaps).map_err(|_| HarnessError::EmptyInput(Layout::Attention.to_string()))?;
    let datasets: BTreeSet<&str> = summary.iter().map(|r| r.dataset.as_str()).collect();
    let mut header = vec!["model".to_string(), "mechanism".to_string()];
    for ds in &datasets {
        for c in ["Sim to Data", "Sim to Layout", "Gap"] {
            header.push(format!("{ds}:{c}"));
        }
    }
    let mut by_row: BTreeMap<(&str, Mechanism), BTreeMap<&str, [f64; 3]>> = BTreeMap::new();
    for r in &summary {
        by_row
            .entry((&r.model_id, r.mechanism))
            .or_default()
            .insert(&r.dataset, [r.sim_to_data, r.sim_to_layout, r.gap]);
    }
    let rows = by_row
        .iter()
        .map(|((model, mech), by_ds)| {
            let mut row = vec![model.to_string(), mech.label().to_string()];
            for ds in &datasets {
                match by_ds.get(ds) {
                    Some(vals) => row.extend(vals.iter().map(|v| format_value(*v))),
                    None => row.extend(std::iter::repeat_n(String::new(), 3)),
                }
            }
            row
        })
        .collect();
    let docs: BTreeSet<(&str, &str, &str)> =
        inputs.gaps.iter().map(|g| (g.model_id.as_str(), g.dataset.as_str(), g.doc_id.as_str())).collect();
    let footer = vec![
        ("triplets_included".to_string(), docs.len().to_string()),
        ("triplets_excluded".to_string(), excluded(&inputs.failures, TaskKind::Triplet).to_string()),
    ];
    Ok(Table { label_columns: 2, header, rows, footer })
}

/// One row per model: natural pair, financial pair and their gap.
fn domain_table(inputs: &ReportInputs) -> Result<Table, HarnessError> {
    if inputs.domains.is_empty() {
        return Err(HarnessError::EmptyInput(Layout::Domain.to_string()));
    }
    let mut by_model: BTreeMap<&str, Vec<&DomainComparison>> = BTreeMap::new();
    for d in &inputs.domains {
        by_model.entry(&d.model_id).or_default().push(d);
    }
    let header = ["model", "Natural", "Financial", "Gap"].map(String::from).to_vec();
    let rows = by_model
        .iter()
        .map(|(model, cs)| {
            let col = |f: fn(&DomainComparison) -> f64| cell(mean(&cs.iter().map(|c| f(c)).collect::<Vec<_>>()));
            vec![model.to_string(), col(|c| c.natural), col(|c| c.financial), col(|c| c.gap)]
        })
        .collect();
    let footer = vec![
        ("comparisons_included".to_string(), inputs.domains.len().to_string()),
        ("comparisons_excluded".to_string(), excluded(&inputs.failures, TaskKind::Domain).to_string()),
    ];
    Ok(Table { label_columns: 1, header, rows, footer })
}

pub fn build_table(inputs: &ReportInputs, layout: Layout) -> Result<Table, HarnessError> {
    match layout {
        Layout::Sensitivity | Layout::Mitigation => score_table(inputs, layout),
        Layout::Attention => attention_table(inputs),
        Layout::Domain => domain_table(inputs),
    }
}

/// Writes `<layout>.csv` and `<layout>.md` into `out_dir`.
pub fn emit_report(inputs: &ReportInputs, layout: Layout, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let table = build_table(inputs, layout)?;
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut written = Vec::new();
    for (ext, text) in [("csv", table.to_csv()), ("md", table.to_markdown())] {
        let p = out_dir.join(format!("{layout}.{ext}"));
        fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
