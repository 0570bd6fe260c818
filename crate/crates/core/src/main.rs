use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use patchprobe::attention::read_triplet_manifest;
use patchprobe::harness::bench::{
    read_pair_manifest, score_pairs, score_triplets, write_outputs, PairCondition, PairManifestEntry, PairTask,
    ScoringPlan, TripletTask,
};
use patchprobe::harness::config::{threads_from_env, BenchConfig};
use patchprobe::harness::report::{emit_report, has_content, load_report_inputs, Layout, ReportInputs};
use patchprobe::harness::synth::{generate_synthetic_pair, ExpectedScores, SynthParams};
use patchprobe::harness::{run_parallel, HarnessError};
use patchprobe::mitigation::{Strategy, DEFAULT_K};
use patchprobe::perturb::{read_manifests, run_manifest, PerturbError};
use patchprobe::similarity::{Direction, Mechanism};
use patchprobe::store::save_embeddings;

#[derive(Parser)]
#[command(name = "patchprobe", version, about = "Patch-embedding pooling diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply edit manifests to document images.
    Perturb {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score pairs with similarity mechanisms.
    Score {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mean,max,maxsim,meanpatch,minpatch")]
        mechanisms: Vec<Mechanism>,
        #[arg(long, value_parser = parse_direction, default_value = "a_to_b")]
        direction: Direction,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score pairs with mitigation strategies.
    Mitigate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "varwgt,attngd,topkr")]
        strategies: Vec<Strategy>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Layout-vs-data gaps from reference/signal/noise triplets.
    Attention {
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mean,max,maxsim,meanpatch,minpatch")]
        mechanisms: Vec<Mechanism>,
        #[arg(long, value_parser = parse_direction, default_value = "a_to_b")]
        direction: Direction,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a TOML benchmark config.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write one synthetic collapse pair plus its closed-form scores.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        changes: usize,
        #[arg(long)]
        angle: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, value_parser = parse_condition, default_value = "micro")]
        condition: PairCondition,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild a table from a results directory.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_parser = parse_layout)]
        layout: Layout,
        /// Defaults to the records directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    match s {
        "a_to_b" => Ok(Direction::AToB),
        "symmetric" => Ok(Direction::Symmetric),
        _ => Err(format!("unknown direction {s:?} (expected a_to_b or symmetric)")),
    }
}

fn parse_condition(s: &str) -> Result<PairCondition, String> {
    s.parse()
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    s.parse()
}

enum Failure {
    Input(String),
    Internal(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e.exit_code() {
            1 => Failure::Input(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<PerturbError> for Failure {
    fn from(e: PerturbError) -> Self {
        match e {
            PerturbError::Io { .. } => Failure::Internal(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

/// `Ok(true)` means some inputs failed and were recorded.
type Outcome = Result<bool, Failure>;

fn workers(flag: Option<usize>) -> Result<usize, Failure> {
    let n = match flag {
        Some(n) => n,
        None => threads_from_env()?.unwrap_or(1),
    };
    if n == 0 {
        return Err(Failure::Input("--threads must be >= 1".into()));
    }
    Ok(n)
}

fn pair_tasks(path: &Path) -> Result<Vec<PairTask>, Failure> {
    let entries = read_pair_manifest(path)?;
    if entries.is_empty() {
        return Err(Failure::Input(format!("{} lists no pairs", path.display())));
    }
    Ok(entries.into_iter().map(PairTask::Manifest).collect())
}

fn score_and_write(path: &Path, plan: ScoringPlan, out: &Path, threads: Option<usize>) -> Outcome {
    let (records, failures) = score_pairs(&pair_tasks(path)?, &plan, workers(threads)?)?;
    let partial = !failures.is_empty();
    write_outputs(&ReportInputs { records, failures, ..Default::default() }, out)?;
    Ok(partial)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Perturb { manifest, out_dir, threads } => {
            let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
            let manifests: Vec<_> =
                read_manifests(&manifest)?.into_iter().map(|m| m.resolved(&base, &out_dir)).collect();
            std::fs::create_dir_all(&out_dir).map_err(|e| Failure::Internal(format!("{}: {e}", out_dir.display())))?;
            let results = run_parallel(&manifests, workers(threads)?, run_manifest);
            let mut lines = String::new();
            let mut partial = false;
            for (m, r) in manifests.iter().zip(results) {
                let line = match r {
                    Ok(report) => serde_json::to_value(report),
                    Err(e) => {
                        partial = true;
                        eprintln!("{}: {e}", m.output_image.display());
                        Ok(serde_json::json!({
                            "output_image": m.output_image,
                            "condition": m.condition,
                            "error": e.to_string(),
                        }))
                    }
                };
                let line = line.map_err(|e| Failure::Internal(e.to_string()))?;
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
            let report = out_dir.join("perturb_report.jsonl");
            std::fs::write(&report, lines).map_err(|e| Failure::Internal(format!("{}: {e}", report.display())))?;
            Ok(partial)
        }
        Command::Score { pairs, mechanisms, direction, out, threads } => {
            let plan = ScoringPlan { mechanisms, strategies: Vec::new(), k: DEFAULT_K, direction };
            score_and_write(&pairs, plan, &out, threads)
        }
        Command::Mitigate { pairs, strategies, k, out, threads } => {
            let plan = ScoringPlan { mechanisms: Vec::new(), strategies, k, direction: Direction::AToB };
            score_and_write(&pairs, plan, &out, threads)
        }
        Command::Attention { triplets, mechanisms, direction, out, threads } => {
            let tasks: Vec<_> = read_triplet_manifest(&triplets)
                .map_err(|e| Failure::Input(e.to_string()))?
                .into_iter()
                .map(TripletTask::Manifest)
                .collect();
            if tasks.is_empty() {
                return Err(Failure::Input(format!("{} lists no triplets", triplets.display())));
            }
            let (gaps, failures) = score_triplets(&tasks, &mechanisms, direction, workers(threads)?);
            if gaps.is_empty() {
                return Err(Failure::Input("every triplet failed".into()));
            }
            let partial = !failures.is_empty();
            write_outputs(&ReportInputs { gaps, failures, ..Default::default() }, &out)?;
            Ok(partial)
        }
        Command::Bench { config } => {
            let mut cfg = BenchConfig::load(&config)?;
            cfg.apply_env_override()?;
            let outcome = patchprobe::harness::bench::run_bench(&cfg)?;
            for p in &outcome.written {
                println!("{}", p.display());
            }
            Ok(outcome.has_failures())
        }
        Command::Synth { n, d, changes, angle, seed, jitter, condition, out } => {
            let params = SynthParams { n, d, change_count: changes, change_angle: angle, jitter, seed };
            let pair_id = format!("synth-{seed}");
            let (a, b) = generate_synthetic_pair(&params, &pair_id)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Internal(format!("{}: {e}", out.display())))?;
            let (pa, pb) = (out.join("original.npy"), out.join("counterfactual.npy"));
            save_embeddings(&a, &pa).map_err(|e| Failure::Internal(e.to_string()))?;
            save_embeddings(&b, &pb).map_err(|e| Failure::Internal(e.to_string()))?;
            let entry = PairManifestEntry {
                pair_id,
                original_path: "original.npy".into(),
                counterfactual_path: "counterfactual.npy".into(),
                condition,
                dataset: "synthetic".into(),
                model_id: a.model_id().to_string(),
            };
            let line = serde_json::to_string(&entry).map_err(|e| Failure::Internal(e.to_string()))?;
            let manifest = out.join("pairs.jsonl");
            std::fs::write(&manifest, line + "\n")
                .map_err(|e| Failure::Internal(format!("{}: {e}", manifest.display())))?;
            #[derive(Serialize)]
            struct Expected {
                params: SynthParams,
                /// Exact only at zero jitter.
                exact: bool,
                scores: ExpectedScores,
            }
            let expected = Expected { params, exact: jitter == 0.0, scores: ExpectedScores::closed_form(&params) };
            write_json(&out.join("expected.json"), &expected)?;
            Ok(false)
        }
        Command::Report { records, layout, out } => {
            let inputs = load_report_inputs(&records)?;
            if !has_content(&inputs, layout) {
                return Err(Failure::Input(format!("{} has no records for the {layout} layout", records.display())));
            }
            let out = out.unwrap_or(records);
            for p in emit_report(&inputs, layout, &out)? {
                println!("{}", p.display());
            }
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved here for partial failures
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("finished with failures; see the failure records");
            ExitCode::from(2)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}
