//! Command-line experiment runner: simulate traces or synthetic workloads
//! under one scheduling policy, and compare reports across policies.

use anyhow::{bail, Context, Result};
use augsched::engine::{Engine, EngineConfig};
use augsched::metrics::SimReport;
use augsched::scheduler::{Policy, SchedulerConfig, STARVATION_DISABLED};
use augsched::workload::{
    generate_synthetic_with, intercept_classes, load_trace, reference_trace, toolbench_classes,
    ApiClassStats, PredictorKind, SynthesisOptions,
};
use augsched::CostModel;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "augsched", version, about = "Scheduling simulator for API-augmented LLM serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write a report.
    Simulate(Box<SimulateArgs>),
    /// Compare report files produced from the same trace.
    Compare(CompareArgs),
    /// Generate a synthetic trace file.
    GenTrace(GenTraceArgs),
}

#[derive(Args, Debug, Default)]
struct SimulateArgs {
    /// Config file (JSON) mirroring these flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Trace file (JSONL), or the builtin name "reference".
    #[arg(long)]
    trace: Option<String>,

    /// Synthetic workload instead of a trace: builtin class set
    /// ("intercept", "toolbench") or a JSON file of API class stats.
    #[arg(long)]
    synthetic: Option<String>,

    /// Number of synthetic requests.
    #[arg(long)]
    n: Option<usize>,

    /// Synthetic arrival rate (requests per time unit).
    #[arg(long)]
    rate: Option<f64>,

    /// Scheduling policy: fcfs | sjf | sjf-total | lamps.
    #[arg(long)]
    policy: Option<String>,

    /// Device memory budget in memory units.
    #[arg(long)]
    memory_budget: Option<f64>,

    /// Cap on summed context claims per batch.
    #[arg(long)]
    max_batch_tokens: Option<u64>,

    /// Cap on concurrently executing requests.
    #[arg(long)]
    max_batch_requests: Option<usize>,

    /// Starvation threshold in iterations (0 disables).
    #[arg(long)]
    starvation_threshold: Option<u64>,

    /// Rank-score refresh interval in iterations.
    #[arg(long)]
    score_interval: Option<u64>,

    /// Predictor: oracle | binned | noisy.
    #[arg(long)]
    predictor: Option<String>,

    /// Error parameter p for the noisy predictor.
    #[arg(long)]
    error_param: Option<f64>,

    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Integer-time unit mode.
    #[arg(long)]
    unit_mode: bool,

    /// Stop simulating at this time.
    #[arg(long)]
    horizon: Option<f64>,

    /// Write the machine-readable report here (default: stdout only).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write the per-event log (JSONL) here.
    #[arg(long)]
    event_log: Option<PathBuf>,
}

/// Config-file mirror of the simulate flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFileConfig {
    trace: Option<String>,
    synthetic: Option<String>,
    n: Option<usize>,
    rate: Option<f64>,
    policy: Option<String>,
    memory_budget: Option<f64>,
    max_batch_tokens: Option<u64>,
    max_batch_requests: Option<usize>,
    starvation_threshold: Option<u64>,
    score_interval: Option<u64>,
    predictor: Option<String>,
    error_param: Option<f64>,
    seed: Option<u64>,
    unit_mode: Option<bool>,
    horizon: Option<f64>,
    out: Option<PathBuf>,
    event_log: Option<PathBuf>,
    cost_model: Option<CostModel>,
    synthesis: Option<SynthesisOptions>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Report files (JSON) from `simulate --out`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,

    /// Baseline policy for percentage deltas.
    #[arg(long, default_value = "fcfs")]
    baseline: String,

    /// Write the comparison as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write the comparison as CSV here (for external plotting).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    /// Builtin class set ("intercept", "toolbench") or a JSON file.
    #[arg(long, default_value = "intercept")]
    classes: String,

    #[arg(long)]
    n: usize,

    #[arg(long)]
    rate: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output trace path (JSONL).
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(*args),
        Command::Compare(args) => compare_cmd(args),
        Command::GenTrace(args) => gen_trace(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_classes(spec: &str) -> Result<Vec<ApiClassStats>> {
    match spec {
        "intercept" => Ok(intercept_classes()),
        "toolbench" => Ok(toolbench_classes()),
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading class config {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing class config {path}"))
        }
    }
}

fn parse_predictor(name: &str, error_param: Option<f64>) -> Result<PredictorKind> {
    match name {
        "oracle" => Ok(PredictorKind::Oracle),
        "binned" => Ok(PredictorKind::default_binned()),
        "noisy" => {
            let p = error_param.context("--predictor noisy requires --error-param")?;
            if !(p.is_finite() && p >= 0.0) {
                bail!("error parameter must be >= 0, got {p}");
            }
            Ok(PredictorKind::noisy(p))
        }
        other => bail!("unknown predictor {other:?} (expected oracle|binned|noisy)"),
    }
}

fn merge<T: Clone>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let file_cfg: SimulateFileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => SimulateFileConfig::default(),
    };

    let trace_spec = merge(args.trace, file_cfg.trace);
    let synthetic_spec = merge(args.synthetic, file_cfg.synthetic);
    let seed = merge(args.seed, file_cfg.seed).unwrap_or(0);
    let unit_mode = args.unit_mode || file_cfg.unit_mode.unwrap_or(false);

    let trace = match (&trace_spec, &synthetic_spec) {
        (Some(t), None) => {
            if t == "reference" {
                reference_trace()
            } else {
                load_trace(t).with_context(|| format!("loading trace {t}"))?
            }
        }
        (None, Some(classes_spec)) => {
            let classes = load_classes(classes_spec)?;
            let n = merge(args.n, file_cfg.n).context("--synthetic requires --n")?;
            let rate = merge(args.rate, file_cfg.rate).context("--synthetic requires --rate")?;
            let opts = file_cfg.synthesis.unwrap_or_default();
            generate_synthetic_with(&classes, n, rate, seed, &opts)?
        }
        (Some(_), Some(_)) => bail!("--trace and --synthetic are mutually exclusive"),
        (None, None) => bail!("one of --trace or --synthetic is required"),
    };

    let policy: Policy = merge(args.policy, file_cfg.policy)
        .unwrap_or_else(|| "fcfs".into())
        .parse()?;
    let memory_budget =
        merge(args.memory_budget, file_cfg.memory_budget).context("--memory-budget is required")?;

    let mut cost = file_cfg.cost_model.unwrap_or_else(|| {
        if unit_mode {
            CostModel::unit()
        } else {
            CostModel::physical(1.0, 1e-6, 1e-6, 1.0, 1000.0)
        }
    });
    if unit_mode {
        cost.unit_mode = true;
    }

    let mut sched = SchedulerConfig::new(policy, memory_budget);
    if let Some(t) = merge(args.max_batch_tokens, file_cfg.max_batch_tokens) {
        sched.max_batch_tokens = t;
    }
    if let Some(r) = merge(args.max_batch_requests, file_cfg.max_batch_requests) {
        sched.max_batch_requests = r;
    }
    if let Some(s) = merge(args.starvation_threshold, file_cfg.starvation_threshold) {
        sched.starvation_threshold = if s == 0 { STARVATION_DISABLED } else { s };
    }
    if let Some(i) = merge(args.score_interval, file_cfg.score_interval) {
        sched.score_update_interval = i;
    }

    let predictor_name = merge(args.predictor, file_cfg.predictor).unwrap_or_else(|| "oracle".into());
    let predictor = parse_predictor(&predictor_name, merge(args.error_param, file_cfg.error_param))?;

    let mut cfg = EngineConfig::new(cost, sched);
    cfg.predictor = predictor;
    cfg.seed = seed;
    cfg.horizon = merge(args.horizon, file_cfg.horizon);
    let event_log_path = merge(args.event_log, file_cfg.event_log);
    cfg.collect_events = event_log_path.is_some();

    let mut engine = Engine::new(&trace, cfg)?;
    let report = engine.run()?;
    report.self_check()?;

    if let Some(path) = &event_log_path {
        std::fs::write(path, engine.event_log_lines())
            .with_context(|| format!("writing event log {}", path.display()))?;
    }
    let out_path = merge(args.out, file_cfg.out);
    if let Some(path) = &out_path {
        write_json(path, &report)?;
    }
    print_report_summary(&report);
    Ok(())
}

fn print_report_summary(report: &SimReport) {
    println!("policy:     {}", report.policy);
    println!("requests:   {} ({} completed, {} rejected)",
        report.n_requests, report.completed, report.rejected.len());
    match &report.aggregates {
        Some(agg) => {
            println!("{:<14} {:>12} {:>12} {:>12}", "metric", "mean", "median", "p99");
            println!(
                "{:<14} {:>12.4} {:>12.4} {:>12.4}",
                "e2e latency", agg.e2e_latency.mean, agg.e2e_latency.median, agg.e2e_latency.p99
            );
            println!(
                "{:<14} {:>12.4} {:>12.4} {:>12.4}",
                "ttft", agg.ttft.mean, agg.ttft.median, agg.ttft.p99
            );
        }
        None => println!("no requests completed; aggregates absent"),
    }
    if let Some(tp) = report.throughput {
        println!("throughput: {tp:.4} req/unit");
    }
}

fn compare_cmd(args: CompareArgs) -> Result<()> {
    let baseline: Policy = args.baseline.parse()?;
    let mut reports = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        let report: SimReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing report {}", path.display()))?;
        reports.push(report);
    }
    let table = augsched::compare(&reports, baseline)?;
    println!("{table}");
    if let Some(path) = &args.out {
        write_json(path, &table)?;
    }
    if let Some(path) = &args.csv {
        let mut csv = String::from(
            "policy,mean_e2e,p99_e2e,mean_ttft,p99_ttft,throughput,mean_e2e_delta_pct\n",
        );
        for r in &table.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.policy, r.mean_e2e, r.p99_e2e, r.mean_ttft, r.p99_ttft, r.throughput,
                r.mean_e2e_delta_pct
            ));
        }
        std::fs::write(path, csv).with_context(|| format!("writing csv {}", path.display()))?;
    }
    Ok(())
}

fn gen_trace(args: GenTraceArgs) -> Result<()> {
    let classes = load_classes(&args.classes)?;
    let trace = augsched::generate_synthetic(&classes, args.n, args.rate, args.seed)?;
    augsched::save_trace(&args.out, &trace)?;
    println!("wrote {} requests to {}", trace.len(), args.out.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file)?;
    Ok(())
}
