//! `starc`: generate workloads, replay them through selection policies and
//! write per-step and summary reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;
use starc_core::experiment::{write_records_csv, write_summary_csv, write_summary_json};
use starc_core::workload::parse_header;
use starc_core::{
    aggregate_summaries, generate, load_trace, run, save_trace, ClusteringConfig, ExperimentSpec,
    PimConfig, Policy, PolicySummary, RetrievalBudget, RunReport, SyntheticConfig, Trace,
};

#[derive(Parser)]
#[command(
    version,
    about = "KV-cache cluster remapping simulator for row-granularity PIM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file
    Gen(GenArgs),
    /// Replay traces through policies at one budget
    Run(RunArgs),
    /// Replay traces through policies at several budgets
    Sweep(SweepArgs),
    /// Print a trace file's header and validate its payload
    Inspect { trace: PathBuf },
}

#[derive(Args, Default)]
struct WorkloadArgs {
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    prefill: Option<usize>,
    #[arg(long)]
    decode: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    query_alignment: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    persistence: Option<f64>,
}

impl WorkloadArgs {
    fn apply(&self, c: &mut SyntheticConfig) {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(d_h => d_h, prefill => prefill_len, decode => decode_len, components => n_components,
             drift => drift, query_alignment => query_alignment, noise_sigma => noise_sigma,
             persistence => persistence);
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output trace path
    #[arg(short, long)]
    out: PathBuf,
    /// TOML file with workload fields; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    workload: WorkloadArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay this trace file instead of generating one per seed
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated: full, window, token_oracle, sparq:R, page:SIZE, starc
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<Policy>>,
    /// Comma-separated seeds; each generates its own workload
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// key = value file with geometry and cost-model parameters
    #[arg(long)]
    pim: Option<PathBuf>,
    /// Decoding tokens between incremental clustering passes
    #[arg(long)]
    interval: Option<usize>,
    /// Cluster count divisor
    #[arg(long)]
    tokens_per_cluster: Option<usize>,
    /// Output directory
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    workload: WorkloadArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    common: ExperimentArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated budgets
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    #[command(flatten)]
    common: ExperimentArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusteringSection {
    interval: Option<usize>,
    tokens_per_cluster: Option<usize>,
    iters: Option<usize>,
}

/// Experiment file layout. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    policies: Option<Vec<Policy>>,
    budget: Option<usize>,
    budgets: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    trace: Option<PathBuf>,
    /// Relative paths resolve against the experiment file's directory.
    pim: Option<PathBuf>,
    #[serde(default)]
    workload: Option<SyntheticConfig>,
    #[serde(default)]
    clustering: ClusteringSection,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn relative_to(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        base.parent().map_or(p.clone(), |dir| dir.join(&p))
    } else {
        p
    }
}

/// Fully resolved inputs shared by `run` and `sweep`.
struct Plan {
    spec: ExperimentSpec,
    seeds: Vec<u64>,
    source: Source,
    budgets: Vec<usize>,
}

enum Source {
    File(Trace),
    Generated(SyntheticConfig),
}

impl Plan {
    fn resolve(
        args: &ExperimentArgs,
        budget_flag: Option<Vec<usize>>,
        sweep: bool,
    ) -> Result<Self> {
        let mut file = match &args.config {
            Some(p) => {
                let mut f: ExperimentFile = read_toml(p)?;
                f.trace = f.trace.map(|t| relative_to(p, t));
                f.pim = f.pim.map(|t| relative_to(p, t));
                f
            }
            None => ExperimentFile::default(),
        };
        let policies = args
            .policies
            .clone()
            .or(file.policies.take())
            .unwrap_or_else(|| {
                vec![
                    Policy::Page { size: 16 },
                    Policy::Starc,
                    Policy::TokenOracle,
                ]
            });
        let budgets = match budget_flag {
            Some(b) => b,
            None if sweep => file
                .budgets
                .clone()
                .unwrap_or_else(|| vec![256, 512, 1024, 2048]),
            None => vec![file.budget.unwrap_or(1024)],
        };
        if budgets.is_empty() {
            bail!("no budgets given");
        }
        let seeds = args
            .seeds
            .clone()
            .or(file.seeds.take())
            .unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            bail!("no seeds given");
        }

        let pim = match args.pim.clone().or(file.pim.take()) {
            Some(p) => PimConfig::load(&p)?,
            None => PimConfig::default(),
        };
        let defaults = ClusteringConfig::default();
        let clustering = ClusteringConfig {
            interval: args
                .interval
                .or(file.clustering.interval)
                .unwrap_or(defaults.interval),
            tokens_per_cluster: args
                .tokens_per_cluster
                .or(file.clustering.tokens_per_cluster)
                .unwrap_or(defaults.tokens_per_cluster),
            iters: file.clustering.iters.unwrap_or(defaults.iters),
        };

        let source = match args.trace.clone().or(file.trace.take()) {
            Some(path) => {
                let trace = load_trace(&path)
                    .with_context(|| format!("loading trace {}", path.display()))?;
                info!(
                    "loaded {}: d_h {}, prefill {}, decode {}",
                    path.display(),
                    trace.d_h(),
                    trace.prefill_len(),
                    trace.decode_len()
                );
                Source::File(trace)
            }
            None => {
                let mut w = file.workload.unwrap_or_default();
                args.workload.apply(&mut w);
                w.validate()?;
                Source::Generated(w)
            }
        };

        Ok(Self {
            spec: ExperimentSpec {
                policies,
                budget: RetrievalBudget::new(budgets[0])?,
                pim,
                clustering,
                seed: 0,
            },
            seeds,
            source,
            budgets,
        })
    }

    fn trace_for(&self, seed: u64) -> Result<std::borrow::Cow<'_, Trace>> {
        Ok(match &self.source {
            Source::File(t) => std::borrow::Cow::Borrowed(t),
            Source::Generated(w) => {
                std::borrow::Cow::Owned(generate(&SyntheticConfig { seed, ..*w })?)
            }
        })
    }

    /// Runs every seed at `budget`, writing per-seed step records into `out`.
    fn run_budget(&self, budget: usize, out: &Path, tag: &str) -> Result<Vec<RunReport>> {
        let mut reports = Vec::with_capacity(self.seeds.len());
        for &seed in &self.seeds {
            let trace = self.trace_for(seed)?;
            let spec = ExperimentSpec {
                budget: RetrievalBudget::new(budget)?,
                seed,
                ..self.spec.clone()
            };
            info!(
                "seed {seed}, B = {budget}: {} decoding steps",
                trace.decode_len()
            );
            let report =
                run(&trace, &spec).with_context(|| format!("seed {seed}, budget {budget}"))?;
            write_records_csv(
                &out.join(format!("steps{tag}_seed{seed}.csv")),
                &report.records,
            )?;
            reports.push(report);
        }
        Ok(reports)
    }
}

fn print_table(rows: &[PolicySummary]) {
    println!(
        "{:>14} {:>6} {:>8} {:>10} {:>8} {:>8} {:>9} {:>9}",
        "policy", "B", "recall", "processed", "max", "waste", "latency", "energy"
    );
    for s in rows {
        println!(
            "{:>14} {:>6} {:>8.3} {:>10.1} {:>8} {:>8.3} {:>9.3} {:>9.3}",
            s.policy.to_string(),
            s.budget,
            s.mean_recall,
            s.mean_processed_tokens,
            s.max_processed_tokens,
            s.mean_waste_ratio,
            s.normalized_latency,
            s.normalized_energy
        );
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut config: SyntheticConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => SyntheticConfig::default(),
    };
    args.workload.apply(&mut config);
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let trace = generate(&config)?;
    save_trace(&trace, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} (d_h {}, prefill {}, decode {})",
        args.out.display(),
        trace.d_h(),
        trace.prefill_len(),
        trace.decode_len()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let plan = Plan::resolve(&args.common, args.budget.map(|b| vec![b]), false)?;
    let out = &args.common.out;
    create_out(out)?;
    let reports = plan.run_budget(plan.budgets[0], out, "")?;
    let summary = aggregate_summaries(&reports)?;
    write_summary_json(&out.join("summary.json"), &summary)?;
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    print_table(&summary);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let plan = Plan::resolve(&args.common, args.budgets, true)?;
    let out = &args.common.out;
    create_out(out)?;
    let mut budgets = plan.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let mut combined = Vec::new();
    for &b in &budgets {
        let reports = plan.run_budget(b, out, &format!("_b{b}"))?;
        combined.extend(aggregate_summaries(&reports)?);
    }
    write_summary_json(&out.join("sweep.json"), &combined)?;
    write_summary_csv(&out.join("sweep.csv"), &combined)?;
    print_table(&combined);
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let header = parse_header(&bytes)?;
    println!("version      {}", header.version);
    println!("encoding     {} (f32 little-endian)", header.encoding);
    println!("d_h          {}", header.d_h);
    println!("prefill_len  {}", header.prefill_len);
    println!("total_len    {}", header.total_len);
    println!("decode_len   {}", header.total_len - header.prefill_len);
    println!("file bytes   {}", bytes.len());
    starc_core::workload::parse_trace(&bytes)?;
    println!("payload      ok");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Inspect { trace } => cmd_inspect(&trace),
    }
}
