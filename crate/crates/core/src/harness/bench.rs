//! Pair scoring and the end-to-end benchmark run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::config::{BenchConfig, SyntheticFamily};
use super::domain::{compare_domains, read_domain_manifest, DomainComparison, DomainManifestEntry};
use super::report::{self, Layout, ReportInputs};
use super::synth::{generate_synthetic_pair, layout_dominated_triplet, natural_analogue_pair};
use super::{run_parallel, HarnessError};
use crate::attention::{attention_gap, read_triplet_manifest, AttentionTriplet, GapRecord, TripletManifestEntry};
use crate::mitigation::{self, Strategy};
use crate::similarity::{self, Direction, Mechanism};
use crate::store::{load_embeddings, PatchEmbeddingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCondition {
    Micro,
    Macro,
    TextOcclusion,
}

impl PairCondition {
    pub const ALL: [PairCondition; 3] = [PairCondition::Micro, PairCondition::Macro, PairCondition::TextOcclusion];

    pub fn key(self) -> &'static str {
        match self {
            PairCondition::Micro => "micro",
            PairCondition::Macro => "macro",
            PairCondition::TextOcclusion => "text_occlusion",
        }
    }
}

impl fmt::Display for PairCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PairCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PairCondition::ALL.into_iter().find(|c| c.key() == s).ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

/// One line of a pair manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    pub pair_id: String,
    pub original_path: PathBuf,
    pub counterfactual_path: PathBuf,
    pub condition: PairCondition,
    pub dataset: String,
    pub model_id: String,
}

impl PairManifestEntry {
    pub fn resolved(mut self, base: &Path) -> Self {
        for p in [&mut self.original_path, &mut self.counterfactual_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }
}

/// Reads a JSONL file, skipping blank lines. Relative paths are fixed up by the caller.
pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| HarnessError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).map_err(|e| HarnessError::Internal(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<PairManifestEntry>, HarnessError> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_jsonl::<PairManifestEntry>(path)?.into_iter().map(|e| e.resolved(base)).collect())
}

/// An original / counterfactual pair ready to score.
#[derive(Debug, Clone)]
pub struct DocumentPair {
    pub pair_id: String,
    pub condition: PairCondition,
    pub dataset: String,
    pub model_id: String,
    pub original: PatchEmbeddingSet,
    pub counterfactual: PatchEmbeddingSet,
}

impl DocumentPair {
    pub fn new(
        pair_id: impl Into<String>,
        condition: PairCondition,
        dataset: impl Into<String>,
        original: PatchEmbeddingSet,
        counterfactual: PatchEmbeddingSet,
    ) -> Result<Self, String> {
        if original.model_id() != counterfactual.model_id() {
            return Err(format!("model ids differ: {} vs {}", original.model_id(), counterfactual.model_id()));
        }
        if original.dim() != counterfactual.dim() {
            return Err(format!("dims differ: {} vs {}", original.dim(), counterfactual.dim()));
        }
        Ok(Self {
            pair_id: pair_id.into(),
            condition,
            dataset: dataset.into(),
            model_id: original.model_id().to_string(),
            original,
            counterfactual,
        })
    }
}

pub fn load_pair(entry: &PairManifestEntry) -> Result<DocumentPair, String> {
    let a = load_embeddings(&entry.original_path).map_err(|e| e.to_string())?;
    let b = load_embeddings(&entry.counterfactual_path).map_err(|e| e.to_string())?;
    if a.model_id() != entry.model_id {
        return Err(format!("manifest says model {}, embeddings say {}", entry.model_id, a.model_id()));
    }
    DocumentPair::new(entry.pair_id.clone(), entry.condition, entry.dataset.clone(), a, b)
}

/// What to compute for every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringPlan {
    pub mechanisms: Vec<Mechanism>,
    pub strategies: Vec<Strategy>,
    pub k: usize,
    pub direction: Direction,
}

impl ScoringPlan {
    pub fn from_config(cfg: &BenchConfig) -> Self {
        Self {
            mechanisms: cfg.mechanisms.clone(),
            strategies: cfg.mitigations.clone(),
            k: cfg.k,
            direction: cfg.maxsim_direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub condition: PairCondition,
    pub dataset: String,
    pub model_id: String,
    /// Mechanism or strategy key to score.
    pub scores: BTreeMap<String, f64>,
    /// Mechanism or strategy key to the reason it could not be computed.
    #[serde(default)]
    pub skipped: BTreeMap<String, String>,
    #[serde(default)]
    pub degenerate_flags: Vec<String>,
    #[serde(default)]
    pub argmin_patch: Option<usize>,
    #[serde(default)]
    pub maxsim_direction: Option<Direction>,
    #[serde(default)]
    pub topk_k: Option<usize>,
}

impl ScoreRecord {
    fn sort_key(&self) -> (&str, &str, PairCondition, &str) {
        (&self.model_id, &self.dataset, self.condition, &self.pair_id)
    }
}

pub fn score_pair(pair: &DocumentPair, plan: &ScoringPlan) -> ScoreRecord {
    let (a, b) = (&pair.original, &pair.counterfactual);
    let mut rec = ScoreRecord {
        pair_id: pair.pair_id.clone(),
        condition: pair.condition,
        dataset: pair.dataset.clone(),
        model_id: pair.model_id.clone(),
        scores: BTreeMap::new(),
        skipped: BTreeMap::new(),
        degenerate_flags: Vec::new(),
        argmin_patch: None,
        maxsim_direction: None,
        topk_k: None,
    };
    for (mech, result) in similarity::score_all(a, b, &plan.mechanisms, plan.direction) {
        match result {
            Ok(s) => {
                rec.scores.insert(mech.key().into(), s.value);
                if s.degenerate_rows > 0 {
                    rec.degenerate_flags.push(format!("{}:{}_zero_norm_rows", mech.key(), s.degenerate_rows));
                }
                if s.argmin.is_some() {
                    rec.argmin_patch = s.argmin;
                }
                if let Some(d) = s.direction {
                    rec.maxsim_direction = Some(d);
                }
            }
            Err(e) => {
                rec.skipped.insert(mech.key().into(), e.to_string());
            }
        }
    }
    for &strategy in &plan.strategies {
        match mitigation::score_strategy(a, b, strategy, plan.k) {
            Ok(v) => {
                rec.scores.insert(strategy.key().into(), v.clamp(-1.0, 1.0));
            }
            Err(e) => {
                rec.skipped.insert(strategy.key().into(), e.to_string());
            }
        }
        if strategy == Strategy::TopKR {
            rec.topk_k = Some(plan.k);
        }
    }
    rec
}

/// A pair, triplet or domain comparison that could not be scored at all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub task: TaskKind,
    pub id: String,
    pub model_id: String,
    pub dataset: String,
    #[serde(default)]
    pub condition: Option<PairCondition>,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pair,
    Triplet,
    Domain,
}

impl FailureRecord {
    fn sort_key(&self) -> (TaskKind, &str, &str, Option<PairCondition>, &str) {
        (self.task, &self.model_id, &self.dataset, self.condition, &self.id)
    }
}

/// Where a pair comes from.
#[derive(Debug, Clone)]
pub enum PairTask {
    Manifest(PairManifestEntry),
    Synthetic { family: SyntheticFamily, index: usize, base_seed: u64 },
}

impl PairTask {
    fn block(&self) -> (String, String, PairCondition) {
        match self {
            PairTask::Manifest(e) => (e.model_id.clone(), e.dataset.clone(), e.condition),
            PairTask::Synthetic { family, .. } => (family.model_id.clone(), family.dataset.clone(), family.condition),
        }
    }

    fn id(&self) -> String {
        match self {
            PairTask::Manifest(e) => e.pair_id.clone(),
            PairTask::Synthetic { family, index, .. } => family.pair_id(*index),
        }
    }

    pub fn load(&self) -> Result<DocumentPair, String> {
        match self {
            PairTask::Manifest(e) => load_pair(e),
            PairTask::Synthetic { family, index, base_seed } => {
                let id = family.pair_id(*index);
                let (a, b) =
                    generate_synthetic_pair(&family.params(*base_seed, *index), &id).map_err(|e| e.to_string())?;
                let (a, b) = (a.with_model(&family.model_id), b.with_model(&family.model_id));
                DocumentPair::new(id, family.condition, family.dataset.clone(), a, b)
            }
        }
    }
}

/// Scores every task on `workers` threads. Output is sorted by (model, dataset, condition, pair_id).
pub fn score_pairs(
    tasks: &[PairTask],
    plan: &ScoringPlan,
    workers: usize,
) -> Result<(Vec<ScoreRecord>, Vec<FailureRecord>), HarnessError> {
    let results = run_parallel(tasks, workers, |t| t.load().map(|p| score_pair(&p, plan)));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (task, r) in tasks.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(reason) => {
                let (model_id, dataset, condition) = task.block();
                failures.push(FailureRecord {
                    task: TaskKind::Pair,
                    id: task.id(),
                    model_id,
                    dataset,
                    condition: Some(condition),
                    reason,
                });
            }
        }
    }
    records.sort_by(|x, y| x.sort_key().cmp(&y.sort_key()));
    failures.sort_by(|x, y| x.sort_key().cmp(&y.sort_key()));

    let scored: BTreeSet<_> = records.iter().map(|r| (r.model_id.clone(), r.dataset.clone(), r.condition)).collect();
    let blocks: BTreeSet<_> = tasks.iter().map(PairTask::block).collect();
    if let Some((model_id, dataset, condition)) = blocks.into_iter().find(|b| !scored.contains(b)) {
        return Err(HarnessError::EmptyConditionBlock { model_id, dataset, condition: condition.to_string() });
    }
    Ok((records, failures))
}

#[derive(Debug, Clone)]
pub enum TripletTask {
    Manifest(TripletManifestEntry),
    Synthetic { layout_fraction: f64, n: usize, d: usize, model_id: String, dataset: String },
}

impl TripletTask {
    fn doc_id(&self) -> String {
        match self {
            TripletTask::Manifest(e) => e.doc_id.clone(),
            TripletTask::Synthetic { layout_fraction, .. } => format!("layout-{layout_fraction:.2}"),
        }
    }

    fn keys(&self) -> (String, String) {
        match self {
            TripletTask::Manifest(e) => (e.model_id.clone(), e.dataset.clone()),
            TripletTask::Synthetic { model_id, dataset, .. } => (model_id.clone(), dataset.clone()),
        }
    }

    pub fn load(&self) -> Result<AttentionTriplet, String> {
        match self {
            TripletTask::Manifest(e) => {
                let load = |p: &Path| load_embeddings(p).map_err(|e| e.to_string());
                AttentionTriplet::new(load(&e.reference_path)?, load(&e.signal_path)?, load(&e.noise_path)?)
                    .map_err(|e| e.to_string())
            }
            TripletTask::Synthetic { layout_fraction, n, d, model_id, .. } => {
                layout_dominated_triplet(*layout_fraction, *n, *d, model_id, &self.doc_id()).map_err(|e| e.to_string())
            }
        }
    }
}

/// Gap records for every task and mechanism, sorted by (model, dataset, doc, mechanism).
pub fn score_triplets(
    tasks: &[TripletTask],
    mechanisms: &[Mechanism],
    direction: Direction,
    workers: usize,
) -> (Vec<GapRecord>, Vec<FailureRecord>) {
    let results = run_parallel(tasks, workers, |t| {
        let tri = t.load()?;
        mechanisms
            .iter()
            .map(|&m| attention_gap(&tri, m, direction).map_err(|e| format!("{m}: {e}")))
            .collect::<Result<Vec<_>, _>>()
    });
    let mut gaps = Vec::new();
    let mut failures = Vec::new();
    for (task, r) in tasks.iter().zip(results) {
        let (model_id, dataset) = task.keys();
        match r {
            Ok(gs) => gaps.extend(gs.into_iter().map(|gap| GapRecord {
                doc_id: task.doc_id(),
                model_id: model_id.clone(),
                dataset: dataset.clone(),
                gap,
            })),
            Err(reason) => failures.push(FailureRecord {
                task: TaskKind::Triplet,
                id: task.doc_id(),
                model_id,
                dataset,
                condition: None,
                reason,
            }),
        }
    }
    gaps.sort_by(|x, y| {
        (&x.model_id, &x.dataset, &x.doc_id, x.gap.mechanism).cmp(&(
            &y.model_id,
            &y.dataset,
            &y.doc_id,
            y.gap.mechanism,
        ))
    });
    failures.sort_by(|x, y| x.sort_key().cmp(&y.sort_key()));
    (gaps, failures)
}

#[derive(Debug, Clone)]
pub enum DomainTask {
    Manifest(DomainManifestEntry),
    Synthetic { family: SyntheticFamily, base_seed: u64 },
}

impl DomainTask {
    fn id(&self) -> String {
        match self {
            DomainTask::Manifest(e) => e.comparison_id.clone(),
            DomainTask::Synthetic { family, .. } => format!("natural-vs-{}", family.name),
        }
    }

    fn model_id(&self) -> String {
        match self {
            DomainTask::Manifest(e) => e.model_id.clone(),
            DomainTask::Synthetic { family, .. } => family.model_id.clone(),
        }
    }

    fn run(&self) -> Result<DomainComparison, String> {
        let err = |e: &dyn fmt::Display| e.to_string();
        let (natural, financial) = match self {
            DomainTask::Manifest(e) => {
                let load = |p: &Path| load_embeddings(p).map_err(|e| e.to_string());
                let nat = DocumentPair::new(
                    "natural",
                    PairCondition::Macro,
                    "natural",
                    load(&e.natural_a)?,
                    load(&e.natural_b)?,
                )?;
                let fin = DocumentPair::new(
                    "financial",
                    PairCondition::Micro,
                    "financial",
                    load(&e.financial_a)?,
                    load(&e.financial_b)?,
                )?;
                (nat, fin)
            }
            DomainTask::Synthetic { family, base_seed } => {
                let fin = PairTask::Synthetic { family: family.clone(), index: 0, base_seed: *base_seed }.load()?;
                let (a, b) = natural_analogue_pair(family.n, family.d.max(4), *base_seed).map_err(|e| err(&e))?;
                let (a, b) = (a.with_model(&family.model_id), b.with_model(&family.model_id));
                (DocumentPair::new("natural", PairCondition::Macro, "natural", a, b)?, fin)
            }
        };
        compare_domains(&self.id(), &natural, &financial).map_err(|e| err(&e))
    }
}

pub fn score_domains(tasks: &[DomainTask], workers: usize) -> (Vec<DomainComparison>, Vec<FailureRecord>) {
    let results = run_parallel(tasks, workers, DomainTask::run);
    let mut out = Vec::new();
    let mut failures = Vec::new();
    for (task, r) in tasks.iter().zip(results) {
        match r {
            Ok(c) => out.push(c),
            Err(reason) => failures.push(FailureRecord {
                task: TaskKind::Domain,
                id: task.id(),
                model_id: task.model_id(),
                dataset: String::new(),
                condition: None,
                reason,
            }),
        }
    }
    out.sort_by(|x, y| (&x.model_id, &x.comparison_id).cmp(&(&y.model_id, &y.comparison_id)));
    failures.sort_by(|x, y| x.sort_key().cmp(&y.sort_key()));
    (out, failures)
}

#[derive(Debug, Clone, Default)]
pub struct BenchOutcome {
    pub inputs: ReportInputs,
    pub written: Vec<PathBuf>,
}

impl BenchOutcome {
    pub fn has_failures(&self) -> bool {
        !self.inputs.failures.is_empty()
    }
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const GAPS_FILE: &str = "gaps.jsonl";
pub const DOMAIN_FILE: &str = "domain.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";

/// Writes whichever record files and tables `inputs` has content for.
pub fn write_outputs(inputs: &ReportInputs, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut jsonl = |name: &str, write: &dyn Fn(&Path) -> Result<(), HarnessError>| {
        let p = out_dir.join(name);
        write(&p).map(|_| written.push(p))
    };
    if !inputs.records.is_empty() {
        jsonl(RECORDS_FILE, &|p| write_jsonl(p, &inputs.records))?;
    }
    if !inputs.gaps.is_empty() {
        jsonl(GAPS_FILE, &|p| write_jsonl(p, &inputs.gaps))?;
    }
    if !inputs.domains.is_empty() {
        jsonl(DOMAIN_FILE, &|p| write_jsonl(p, &inputs.domains))?;
    }
    jsonl(FAILURES_FILE, &|p| write_jsonl(p, &inputs.failures))?;
    for layout in Layout::ALL {
        if report::has_content(inputs, layout) {
            written.extend(report::emit_report(inputs, layout, out_dir)?);
        }
    }
    Ok(written)
}

type Tasks = (Vec<PairTask>, Vec<TripletTask>, Vec<DomainTask>);

fn manifest_tasks(cfg: &BenchConfig) -> Result<Tasks, HarnessError> {
    let mut pairs = Vec::new();
    for p in &cfg.pairs {
        pairs.extend(read_pair_manifest(p)?.into_iter().map(PairTask::Manifest));
    }
    let mut triplets = Vec::new();
    for p in &cfg.triplets {
        triplets.extend(read_triplet_manifest(p)?.into_iter().map(TripletTask::Manifest));
    }
    let mut domains = Vec::new();
    for p in &cfg.domain {
        domains.extend(read_domain_manifest(p)?.into_iter().map(DomainTask::Manifest));
    }
    if let Some(s) = &cfg.synthetic {
        for f in &s.families {
            pairs.extend((0..f.pairs).map(|index| PairTask::Synthetic {
                family: f.clone(),
                index,
                base_seed: cfg.seed,
            }));
        }
        if let Some(a) = &s.attention {
            triplets.extend(a.layout_fractions.iter().map(|&p| TripletTask::Synthetic {
                layout_fraction: p,
                n: a.n,
                d: a.d,
                model_id: a.model_id.clone(),
                dataset: a.dataset.clone(),
            }));
        }
        if let Some(d) = &s.domain {
            let family = s.families.iter().find(|f| f.name == d.family).cloned().ok_or_else(|| {
                HarnessError::InvalidConfig(format!("domain comparison names unknown family {:?}", d.family))
            })?;
            domains.push(DomainTask::Synthetic { family, base_seed: cfg.seed });
        }
    }
    Ok((pairs, triplets, domains))
}

/// Runs everything the config asks for and writes the results to `cfg.out_dir`.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome, HarnessError> {
    cfg.validate()?;
    let (pair_tasks, triplet_tasks, domain_tasks) = manifest_tasks(cfg)?;
    if pair_tasks.is_empty() && triplet_tasks.is_empty() && domain_tasks.is_empty() {
        return Err(HarnessError::InvalidConfig("config lists no pairs, triplets or domain comparisons".into()));
    }
    let workers = cfg.parallelism;
    let plan = ScoringPlan::from_config(cfg);
    let mut inputs = ReportInputs::default();
    if !pair_tasks.is_empty() {
        let (records, failures) = score_pairs(&pair_tasks, &plan, workers)?;
        inputs.records = records;
        inputs.failures.extend(failures);
    }
    if !triplet_tasks.is_empty() {
        let mechanisms = if cfg.mechanisms.is_empty() { Mechanism::ALL.to_vec() } else { cfg.mechanisms.clone() };
        let (gaps, failures) = score_triplets(&triplet_tasks, &mechanisms, cfg.maxsim_direction, workers);
        inputs.gaps = gaps;
        inputs.failures.extend(failures);
    }
    if !domain_tasks.is_empty() {
        let (domains, failures) = score_domains(&domain_tasks, workers);
        inputs.domains = domains;
        inputs.failures.extend(failures);
    }
    let written = write_outputs(&inputs, &cfg.out_dir)?;
    Ok(BenchOutcome { inputs, written })
}
