//! Command-line entry point, run configuration, and report files.
//!
//! `batchverify run` loads a network and an input CSV, verifies every input's
//! epsilon-ball (jointly in batch mode, individually in one-by-one mode), and
//! writes a JSON report. `batchverify summarize` renders a report — and the
//! speedup against a baseline report — as a table.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bandit::{BatchSizeBandit, RoundTrace};
use crate::driver::{
    verify_group, verify_one_by_one, BatchRecord, DriverConfig, InputVerdict, MilpEngine,
    RobustnessStatus, SplitStrategy, WallClock,
};
use crate::network::{load_network, Network};
use crate::solver::SolverConfig;
use crate::{Error, Result};

/// Which class each input is verified against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassSelection {
    /// Partition inputs by predicted class and run once per class.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    Batch,
    OneByOne,
}

/// Full configuration of one verification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: PathBuf,
    pub inputs: PathBuf,
    pub class: ClassSelection,
    pub epsilon: f64,
    pub max_batch_size: usize,
    pub bucket_size: usize,
    pub rho: f64,
    pub seed: u64,
    pub split_layer: SplitStrategy,
    pub mode: RunMode,
    pub report: Option<PathBuf>,
    pub feas_tol: f64,
    pub int_tol: f64,
    pub obj_tol: f64,
    pub node_limit: u64,
    /// Thread cap for internal parallelism; 1 disables it.
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidInput("epsilon must be non-negative".into()));
        }
        if self.max_batch_size < 1 {
            return Err(Error::InvalidInput("max-batch-size must be at least 1".into()));
        }
        if self.bucket_size < 1 || self.bucket_size > self.max_batch_size {
            return Err(Error::InvalidInput(format!(
                "bucket-size must lie in [1, {}]",
                self.max_batch_size
            )));
        }
        Ok(())
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            feas_tol: self.feas_tol,
            int_tol: self.int_tol,
            obj_tol: self.obj_tol,
            node_limit: self.node_limit,
        }
    }
}

// ---------------------------------------------------------------------------
// Report schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBatch {
    pub class: usize,
    #[serde(flatten)]
    pub record: BatchRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTraceRow {
    pub class: usize,
    #[serde(flatten)]
    pub row: RoundTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub bounds_s: f64,
    pub batch_s: f64,
    pub refine_s: f64,
    pub split_s: f64,
    /// Wall time over all per-class runs.
    pub total_s: f64,
}

/// Per-class outcome counts; certification rate is robust over correctly
/// classified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub total: usize,
    pub correctly_classified: usize,
    pub robust: usize,
    pub non_robust: usize,
    pub refinements: usize,
    pub split_layer: usize,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub mode: RunMode,
    pub per_input: Vec<InputVerdict>,
    pub batches: Vec<ReportBatch>,
    pub timing: Timing,
    pub bandit_trace: Vec<ReportTraceRow>,
    pub classes: Vec<ClassSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incomplete: Option<String>,
}

// ---------------------------------------------------------------------------
// Input loading
// ---------------------------------------------------------------------------

/// Reads the input CSV: one input per row, values in [0, 1], no header.
/// Malformed rows are rejected together, reported with 1-based line numbers.
pub fn load_inputs(path: &Path, expected_dim: usize) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut rows = Vec::new();
    let mut bad: Vec<String> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                bad.push(format!("line {}: {}", line, e));
                continue;
            }
        };
        if record.len() != expected_dim {
            bad.push(format!(
                "line {}: {} values, expected {}",
                line,
                record.len(),
                expected_dim
            ));
            continue;
        }
        let mut row = Vec::with_capacity(expected_dim);
        let mut ok = true;
        for field in record.iter() {
            match field.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => row.push(v),
                Ok(v) => {
                    bad.push(format!("line {}: value {} outside [0, 1]", line, v));
                    ok = false;
                    break;
                }
                Err(e) => {
                    bad.push(format!("line {}: {}", line, e));
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            rows.push(row);
        }
    }
    if !bad.is_empty() {
        let shown = bad.iter().take(10).cloned().collect::<Vec<_>>().join("; ");
        let suffix = if bad.len() > 10 {
            format!(" (and {} more)", bad.len() - 10)
        } else {
            String::new()
        };
        return Err(Error::InvalidInput(format!(
            "rejected input rows: {}{}",
            shown, suffix
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("input file contains no rows".into()));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

/// Executes a full verification run and returns the report. The report is
/// also written to `config.report` when set.
pub fn run(config: &RunConfig) -> Result<Report> {
    config.validate()?;
    let net = load_network(BufReader::new(File::open(&config.network)?))?;
    let inputs = load_inputs(&config.inputs, net.input_dim())?;

    // Group inputs by target class, keeping original row indices.
    let mut groups: BTreeMap<usize, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    match config.class {
        ClassSelection::Fixed(c) => {
            if c >= net.output_dim() {
                return Err(Error::InvalidInput(format!(
                    "class {} out of range for {} outputs",
                    c,
                    net.output_dim()
                )));
            }
            groups.insert(c, inputs.into_iter().enumerate().collect());
        }
        ClassSelection::Auto => {
            for (i, x) in inputs.into_iter().enumerate() {
                let c = net.classify(&x)?;
                groups.entry(c).or_default().push((i, x));
            }
        }
    }

    let mut per_input: Vec<InputVerdict> = Vec::new();
    let mut batches = Vec::new();
    let mut trace = Vec::new();
    let mut classes = Vec::new();
    let mut timing = Timing {
        bounds_s: 0.0,
        batch_s: 0.0,
        refine_s: 0.0,
        split_s: 0.0,
        total_s: 0.0,
    };
    let mut incomplete = None;

    for (&class, members) in &groups {
        let report = run_class(config, &net, class, members)?;
        if report.split_fallback {
            eprintln!(
                "warning: class {}: too few inputs to learn the split layer, using layer 1",
                class
            );
        }
        timing.bounds_s += report.totals.bounds_s;
        timing.batch_s += report.totals.batch_s;
        timing.refine_s += report.totals.refine_s;
        timing.split_s += report.split_s;
        timing.total_s += report.wall_s;
        let robust = report
            .verdicts
            .iter()
            .filter(|v| v.status == RobustnessStatus::Robust)
            .count();
        let misclassified = report
            .verdicts
            .iter()
            .filter(|v| v.status == RobustnessStatus::NonRobustMisclassified)
            .count();
        classes.push(ClassSummary {
            class,
            total: members.len(),
            correctly_classified: members.len() - misclassified,
            robust,
            non_robust: members.len() - misclassified - robust,
            refinements: report.batches.iter().map(|b| b.refinements).sum(),
            split_layer: report.split_layer,
            wall_s: report.wall_s,
        });
        for b in report.batches {
            batches.push(ReportBatch { class, record: b });
        }
        for row in report.bandit_trace {
            trace.push(ReportTraceRow { class, row });
        }
        if let Some(e) = report.incomplete {
            incomplete.get_or_insert(e);
        }
        per_input.extend(report.verdicts);
    }
    per_input.sort_by_key(|v| v.input);

    let report = Report {
        config: config.clone(),
        mode: config.mode,
        per_input,
        batches,
        timing,
        bandit_trace: trace,
        classes,
        incomplete,
    };
    if let Some(path) = &config.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

fn run_class(
    config: &RunConfig,
    net: &Network,
    class: usize,
    members: &[(usize, Vec<f64>)],
) -> Result<crate::driver::RunReport> {
    let engine = MilpEngine {
        net,
        epsilon: config.epsilon,
        class,
        solver: config.solver(),
    };
    let clock = WallClock::new();
    match config.mode {
        RunMode::OneByOne => verify_one_by_one(net, members, class, &engine, &clock),
        RunMode::Batch => {
            let driver_config = DriverConfig {
                epsilon: config.epsilon,
                class,
                max_batch_size: config.max_batch_size,
                bucket_size: config.bucket_size,
                rho: config.rho,
                // Distinct, deterministic stream per class.
                seed: config.seed.wrapping_add((class as u64).wrapping_mul(0x9e3779b97f4a7c15)),
                split: config.split_layer,
                solver: config.solver(),
                parallel_bounds: config.threads != Some(1),
            };
            let mut policy =
                BatchSizeBandit::new(config.max_batch_size, config.bucket_size, config.rho)?;
            verify_group(net, members, &driver_config, &engine, &mut policy, &clock)
        }
    }
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

/// Renders per-class certification rates and timings; with a baseline report
/// the overall speedup (baseline time / this report's time) is appended.
pub fn summarize(report: &Report, baseline: Option<&Report>) -> String {
    let mut out = String::new();
    out.push_str("class  cert.rate   total  refine  split  time[s]\n");
    for c in &report.classes {
        out.push_str(&format!(
            "{:<5}  {:>4} / {:<4}  {:>5}  {:>6}  {:>5}  {:>8.3}\n",
            c.class,
            c.robust,
            c.correctly_classified,
            c.total,
            c.refinements,
            c.split_layer,
            c.wall_s,
        ));
    }
    let robust: usize = report.classes.iter().map(|c| c.robust).sum();
    let correct: usize = report.classes.iter().map(|c| c.correctly_classified).sum();
    out.push_str(&format!(
        "total  {} / {} certified, {:.3}s\n",
        robust, correct, report.timing.total_s
    ));
    if let Some(base) = baseline {
        let speedup = base.timing.total_s / report.timing.total_s.max(1e-12);
        out.push_str(&format!(
            "speedup vs baseline: {:.2}x ({:.3}s -> {:.3}s)\n",
            speedup, base.timing.total_s, report.timing.total_s
        ));
    }
    if let Some(e) = &report.incomplete {
        out.push_str(&format!("INCOMPLETE: {}\n", e));
    }
    out
}

/// Reads a report file back.
pub fn read_report(path: &Path) -> Result<Report> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "batchverify",
    about = "Complete group local-robustness verification for ReLU classifiers",
    version
)]
pub struct CliArgs {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Verify the epsilon-balls of an input set.
    Run(RunArgs),
    /// Render a report file as a table; add a baseline for speedup.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Network file (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Input CSV, one input per row, values in [0, 1].
    #[arg(long)]
    inputs: PathBuf,
    /// Target class index, or "auto" to partition by predicted class.
    #[arg(long, default_value = "auto")]
    class: String,
    /// Radius of the verified L-infinity balls.
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 8)]
    max_batch_size: usize,
    #[arg(long, default_value_t = 2)]
    bucket_size: usize,
    /// Risk-aversion factor of the batch-size bandit.
    #[arg(long, default_value_t = 100.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split layer: "auto", "last-conv", or a 1-based layer index.
    #[arg(long, default_value = "auto")]
    split_layer: String,
    /// "batch" or "one-by-one".
    #[arg(long, default_value = "batch")]
    mode: String,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    feas_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    int_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    obj_tol: f64,
    /// Branch-and-bound node budget per solve.
    #[arg(long, default_value_t = 4_000_000)]
    node_limit: u64,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Report to summarize.
    report: PathBuf,
    /// Baseline report for the speedup row (typically a one-by-one run).
    #[arg(long)]
    baseline: Option<PathBuf>,
}

fn parse_class(s: &str) -> Result<ClassSelection> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(ClassSelection::Auto);
    }
    s.parse::<usize>()
        .map(ClassSelection::Fixed)
        .map_err(|_| Error::InvalidInput(format!("invalid --class value `{}`", s)))
}

fn parse_split(s: &str) -> Result<SplitStrategy> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(SplitStrategy::Auto);
    }
    if s.eq_ignore_ascii_case("last-conv") {
        return Ok(SplitStrategy::LastConv);
    }
    s.parse::<usize>()
        .map(SplitStrategy::Fixed)
        .map_err(|_| Error::InvalidInput(format!("invalid --split-layer value `{}`", s)))
}

fn parse_mode(s: &str) -> Result<RunMode> {
    match s.to_ascii_lowercase().as_str() {
        "batch" => Ok(RunMode::Batch),
        "one-by-one" => Ok(RunMode::OneByOne),
        other => Err(Error::InvalidInput(format!("invalid --mode value `{}`", other))),
    }
}

fn config_from_args(args: RunArgs, threads: Option<usize>) -> Result<RunConfig> {
    Ok(RunConfig {
        network: args.network,
        inputs: args.inputs,
        class: parse_class(&args.class)?,
        epsilon: args.epsilon,
        max_batch_size: args.max_batch_size,
        bucket_size: args.bucket_size,
        rho: args.rho,
        seed: args.seed,
        split_layer: parse_split(&args.split_layer)?,
        mode: parse_mode(&args.mode)?,
        report: args.report,
        feas_tol: args.feas_tol,
        int_tol: args.int_tol,
        obj_tol: args.obj_tol,
        node_limit: args.node_limit,
        threads,
    })
}

/// Exit code for an error: 1 for usage and input problems, 2 for solver
/// failures.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Solver(_) | Error::NodeLimit(_) => 2,
        _ => 1,
    }
}

/// Command-line entry point; returns the process exit code.
pub fn main_entry() -> i32 {
    let args = match CliArgs::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match std::env::var("BATCHVERIFY_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Some(n),
            _ => {
                eprintln!("error: BATCHVERIFY_THREADS must be a positive integer");
                return 1;
            }
        },
        Err(_) => None,
    };
    if let Some(n) = threads {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match args.command {
        CliCommand::Run(run_args) => {
            let config = match config_from_args(run_args, threads) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}", e);
                    return 1;
                }
            };
            match run(&config) {
                Ok(report) => {
                    print!("{}", summarize(&report, None));
                    match &report.incomplete {
                        Some(reason) => {
                            eprintln!("error: run incomplete: {}", reason);
                            2
                        }
                        None => 0,
                    }
                }
                Err(e) => {
                    eprintln!("error: {}", e);
                    exit_code(&e)
                }
            }
        }
        CliCommand::Summarize(sum_args) => {
            let report = match read_report(&sum_args.report) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {}", e);
                    return 1;
                }
            };
            let baseline = match sum_args.baseline.as_deref().map(read_report) {
                Some(Ok(b)) => Some(b),
                Some(Err(e)) => {
                    eprintln!("error: {}", e);
                    return 1;
                }
                None => None,
            };
            print!("{}", summarize(&report, baseline.as_ref()));
            0
        }
    }
}
