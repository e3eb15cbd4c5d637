//! Command-line interface.

use std::fs::{self, File};
use std::io::BufWriter;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use opprune_core::eval::Evaluator;
use opprune_core::flops::{self, FlopsError};
use opprune_core::model::{DecoderConfig, Policy};
use opprune_core::oracle::SyntheticOracle;
use opprune_core::search::{self, SearchError, SearchMode};
use opprune_core::toy::ToyDecoder;
use opprune_core::trace::{TraceEvent, TraceSink, VecSink};
use serde::Serialize;

use crate::bridge::{spawn_worker, WorkerSession};
use crate::format::{
    read_json, write_json, Budget, ConfigFile, EvaluatorSpec, FilterFile, FormatError, PolicyFile,
    SequenceFile,
};
use crate::parallel::Threaded;
use crate::trace_log::{JsonlSink, Tee};
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "opprune", version, about = "Operation-level pruning policy search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the free-to-prune search and write the filter result.
    Filter(SearchArgs),
    /// Sort all operations from most to least redundant.
    Sort(SearchArgs),
    /// Sort, then truncate to the config's budget (or the one given here).
    Run {
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Cut a sorted sequence at the shortest prefix meeting a FLOPs budget.
    Truncate {
        #[arg(long)]
        sequence: PathBuf,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Read the budget from this config when no budget flag is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Price a policy.
    Flops {
        #[arg(long)]
        policy: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a policy (or the unpruned model) with the configured evaluator.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw a policy as CSV and SVG heatmaps.
    Viz {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SearchMode>,
    /// Overrides the evaluator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rescore candidates on several threads when the evaluator allows it.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long, requires = "parallel")]
    pub threads: Option<NonZeroUsize>,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct BudgetArgs {
    /// Fraction of baseline FLOPs to keep.
    #[arg(long)]
    pub budget_ratio: Option<f64>,
    /// Required FLOPs reduction.
    #[arg(long)]
    pub budget_flops: Option<u64>,
}

impl BudgetArgs {
    fn budget(&self) -> Option<Budget> {
        match (self.budget_ratio, self.budget_flops) {
            (None, None) => None,
            (r, t) => Some(Budget {
                tau_absolute: t,
                retain_ratio: r,
            }),
        }
    }
}

fn parse_mode(s: &str) -> Result<SearchMode, String> {
    match s {
        "adaptive" => Ok(SearchMode::Adaptive),
        "naive" => Ok(SearchMode::Naive),
        _ => Err(format!("expected `adaptive` or `naive`, got `{s}`")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Evaluator(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Evaluator(_) => 4,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => CliError::Other(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<FlopsError> for CliError {
    fn from(e: FlopsError) -> Self {
        match e {
            FlopsError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Flops(f) => f.into(),
            SearchError::Model(_) | SearchError::Config(_) | SearchError::Schedule(_) => {
                CliError::Config(e.to_string())
            }
            SearchError::Eval { .. }
            | SearchError::Nondeterministic { .. }
            | SearchError::NonFiniteScore => CliError::Evaluator(e.to_string()),
            SearchError::Stalled { .. } | SearchError::Sink(_) => CliError::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

/// An evaluator built from a config file.
pub enum Backend {
    Oracle(SyntheticOracle),
    Toy(Box<ToyDecoder>),
    Worker(WorkerSession),
}

impl Backend {
    pub fn build(
        file: &ConfigFile,
        config: &DecoderConfig,
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        match &file.evaluator {
            EvaluatorSpec::Oracle(o) => {
                let mut o = o.clone();
                if let Some(s) = seed {
                    o.seed = s;
                }
                Ok(Backend::Oracle(SyntheticOracle::new(o.to_spec(config)?)))
            }
            EvaluatorSpec::Toy(t) => {
                let mut t = t.clone();
                if let Some(s) = seed {
                    t.seed = s;
                }
                let model = ToyDecoder::new(t.to_spec(config)?)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                Ok(Backend::Toy(Box::new(model)))
            }
            EvaluatorSpec::External(x) => spawn_worker(
                &x.command,
                x.config.clone(),
                config.layout.clone(),
                Duration::from_millis(x.timeout_ms),
            )
            .map(Backend::Worker)
            .map_err(|e| CliError::Evaluator(e.to_string())),
        }
    }

    pub fn evaluator(&self) -> &dyn Evaluator {
        match self {
            Backend::Oracle(o) => o,
            Backend::Toy(t) => t.as_ref(),
            Backend::Worker(w) => w,
        }
    }

    pub fn finish(self) -> Result<(), CliError> {
        match self {
            Backend::Worker(w) => w.shutdown().map_err(|e| CliError::Evaluator(e.to_string())),
            _ => Ok(()),
        }
    }
}

struct Loaded {
    file: ConfigFile,
    config: DecoderConfig,
}

fn load(path: &Path, args: Option<&SearchArgs>) -> Result<Loaded, CliError> {
    let mut file: ConfigFile = read_json(path)?;
    if let Some(a) = args {
        if let Some(m) = a.mode {
            file.search.mode = m;
        }
        if a.parallel {
            file.search.parallel_eval = true;
        }
    }
    let config = file.decoder_config();
    file.search
        .validate(config.shape.layers)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Loaded { file, config })
}

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn trace_sink(dir: &Path, config: &DecoderConfig) -> Result<JsonlSink<BufWriter<File>>, CliError> {
    let path = dir.join("trace.jsonl");
    let f = File::create(&path).map_err(|e| io_err(&path, e))?;
    Ok(JsonlSink::new(BufWriter::new(f), config.layout.clone()))
}

fn threaded(args: &SearchArgs) -> Threaded {
    args.threads.map(Threaded::new).unwrap_or_else(Threaded::available)
}

fn print_json<T: Serialize>(value: &T) {
    print!("{}", crate::format::to_json_string(value));
}

fn cmd_filter(args: &SearchArgs) -> Result<(), CliError> {
    let Loaded { file, config } = load(&args.config, Some(args))?;
    out_dir(&args.out)?;
    let backend = Backend::build(&file, &config, args.seed)?;
    let eval = backend.evaluator();
    let mut events = VecSink::default();
    let mut sink = Tee(trace_sink(&args.out, &config)?, &mut events);
    let baseline = eval
        .baseline(&config.empty_policy())
        .map_err(|e| CliError::Evaluator(e.to_string()))?;
    sink.record(&TraceEvent::Baseline {
        score: baseline,
        calls: eval.call_count(),
    })
    .map_err(|e| CliError::Other(e.to_string()))?;
    let result = search::presort_filter(&config, &file.search, baseline, eval, &mut sink)?;
    drop(sink);
    let out = FilterFile::new(&config, baseline, &result, &events.0, eval.call_count());
    write_json(&args.out.join("filter.json"), &out)?;
    backend.finish()
}

fn cmd_sort(args: &SearchArgs) -> Result<(), CliError> {
    let Loaded { file, config } = load(&args.config, Some(args))?;
    out_dir(&args.out)?;
    let backend = Backend::build(&file, &config, args.seed)?;
    let mut sink = trace_sink(&args.out, &config)?;
    let pool = threaded(args);
    let out = search::sort_pipeline(&config, &file.search, backend.evaluator(), Some(&pool), &mut sink)?;
    write_json(&args.out.join("sequence.json"), &SequenceFile::new(&config, &out))?;
    backend.finish()
}

fn write_truncation(
    dir: &Path,
    config: &DecoderConfig,
    policy: &Policy,
) -> Result<flops::FlopsReport, CliError> {
    let report = flops::policy_flops(policy, config)?;
    write_json(&dir.join("policy.json"), &PolicyFile::new(config, policy))?;
    write_json(&dir.join("flops.json"), &report)?;
    Ok(report)
}

fn cmd_run(args: &SearchArgs, budget: &BudgetArgs) -> Result<(), CliError> {
    let Loaded { file, config } = load(&args.config, Some(args))?;
    let budget = budget
        .budget()
        .or(file.budget)
        .ok_or_else(|| CliError::Config("no budget given".into()))?;
    let tau = budget.tau(flops::baseline_flops(&config))?;
    // reject infeasible budgets before launching the evaluator
    let excl = search::exclusions(&config, &file.search)?;
    let max = search::max_reduction(&config, &excl)?;
    if tau > max {
        return Err(FlopsError::Infeasible {
            tau,
            max_reduction: max,
        }
        .into());
    }
    out_dir(&args.out)?;
    let backend = Backend::build(&file, &config, args.seed)?;
    let mut sink = trace_sink(&args.out, &config)?;
    let pool = threaded(args);
    let out = search::run_pipeline(&config, &file.search, backend.evaluator(), tau, Some(&pool), &mut sink)?;
    write_json(&args.out.join("sequence.json"), &SequenceFile::new(&config, &out.sort))?;
    write_truncation(&args.out, &config, &out.truncation.policy)?;
    backend.finish()
}

fn cmd_truncate(
    sequence: &Path,
    budget: &BudgetArgs,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let file: SequenceFile = read_json(sequence)?;
    let (config, seq) = file.to_sequence()?;
    let budget = match budget.budget() {
        Some(b) => b,
        None => {
            let path = config_path
                .ok_or_else(|| CliError::Config("pass --budget-ratio, --budget-flops or --config".into()))?;
            read_json::<ConfigFile>(path)?
                .budget
                .ok_or_else(|| CliError::Config(format!("{} has no budget", path.display())))?
        }
    };
    let tau = budget.tau(flops::baseline_flops(&config))?;
    let t = flops::truncate_to_budget(&seq, &config, tau)?;
    out_dir(out)?;
    let report = write_truncation(out, &config, &t.policy)?;
    eprintln!(
        "k* = {} of {} operations, retained FLOPs {:.4}",
        t.k_star,
        seq.order.len(),
        report.retained_ratio
    );
    Ok(())
}

fn load_policy(path: &Path) -> Result<(DecoderConfig, Policy), CliError> {
    let file: PolicyFile = read_json(path)?;
    Ok(file.to_policy()?)
}

fn cmd_flops(policy: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let (config, policy) = load_policy(policy)?;
    let report = flops::policy_flops(&policy, &config)?;
    match out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOut {
    score: f64,
    calls: u64,
}

fn cmd_eval(config_path: &Path, policy: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let Loaded { file, config } = load(config_path, None)?;
    let policy = match policy {
        Some(p) => {
            let (pc, policy) = load_policy(p)?;
            if pc.digest() != config.digest() {
                return Err(CliError::Config(format!(
                    "policy was built for decoder {} but the config describes {}",
                    pc.digest(),
                    config.digest()
                )));
            }
            policy
        }
        None => config.empty_policy(),
    };
    let backend = Backend::build(&file, &config, seed)?;
    let eval = backend.evaluator();
    let score = if policy.is_empty() {
        eval.baseline(&policy)
    } else {
        eval.evaluate(&policy)
    }
    .map_err(|e| CliError::Evaluator(e.to_string()))?;
    print_json(&EvalOut {
        score,
        calls: eval.call_count(),
    });
    backend.finish()
}

fn cmd_viz(policy: &Path, out: &Path) -> Result<(), CliError> {
    let (config, policy) = load_policy(policy)?;
    out_dir(out)?;
    let csv = out.join("policy.csv");
    fs::write(&csv, viz::csv(&config, &policy)).map_err(|e| io_err(&csv, e))?;
    let svg = out.join("policy.svg");
    fs::write(&svg, viz::svg(&config, &policy)).map_err(|e| io_err(&svg, e))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Cmd::Filter(a) => cmd_filter(a),
        Cmd::Sort(a) => cmd_sort(a),
        Cmd::Run { search, budget } => cmd_run(search, budget),
        Cmd::Truncate {
            sequence,
            budget,
            config,
            out,
        } => cmd_truncate(sequence, budget, config.as_deref(), out),
        Cmd::Flops { policy, out } => cmd_flops(policy, out.as_deref()),
        Cmd::Eval {
            config,
            policy,
            seed,
        } => cmd_eval(config, policy.as_deref(), *seed),
        Cmd::Viz { policy, out } => cmd_viz(policy, out),
    }
}
