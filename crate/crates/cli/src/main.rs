//! `tts`: sample, revise, aggregate, analyze and simulate runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tts_core::aggregate::Aggregator;
use tts_core::analysis::{
    accuracy_by_step, accuracy_vs_budget, coverage_parallel, last_revision_accuracy, question_map,
    run_analysis, AnalysisKind, AnalysisOptions, Budget,
};
use tts_core::orchestrator::{run_benchmark, Mode};
use tts_core::provider;
use tts_core::seed::digest_hex;
use tts_core::simulator::{revise_simulated_run, write_simulated_run};
use tts_core::store::{LoadedRun, RunSource, RunStore, CHAINS_FILE, RECORDS_FILE};
use tts_core::types::{group_by_question, load_dataset, GenerationRecord, RevisionChain};
use tts_core::{RunConfig, SimParams};

/// `println!` that ends the process quietly when stdout is closed.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

#[derive(Parser)]
#[command(name = "tts", version, about = "Test-time scaling evaluation toolkit")]
struct Cli {
    /// Directory holding runs.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    runs_dir: PathBuf,
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw k solutions per question into a run (resumes an existing run).
    Sample(SampleArgs),
    /// Grow revision chains from a run's samples.
    Revise(ReviseArgs),
    /// Accuracy of a selection method per dataset.
    Aggregate(AggregateArgs),
    /// Write one analysis as CSV plus a JSON summary.
    Analyze(AnalyzeArgs),
    /// Write a synthetic run.
    Simulate(SimulateArgs),
}

/// Per-field overrides of the config file.
#[derive(Args, Default)]
struct ConfigOverrides {
    #[arg(long, allow_negative_numbers = true)]
    temperature: Option<f64>,
    #[arg(long, alias = "max_tokens")]
    max_tokens: Option<u32>,
    #[arg(long, alias = "samples_per_question")]
    samples_per_question: Option<u32>,
    #[arg(long, alias = "revision_steps")]
    revision_steps: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, alias = "provider_endpoint")]
    provider_endpoint: Option<String>,
    #[arg(long, alias = "model_name")]
    model_name: Option<String>,
    #[arg(long, alias = "system_prompt")]
    system_prompt: Option<String>,
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long, alias = "choice_instruction")]
    choice_instruction: Option<String>,
    /// Comma-separated continuation markers.
    #[arg(long, alias = "revision_candidates", value_delimiter = ',')]
    revision_candidates: Option<Vec<String>>,
    #[arg(long, alias = "concurrency_limit")]
    concurrency_limit: Option<u32>,
    #[arg(long, alias = "chain_token_ceiling")]
    chain_token_ceiling: Option<u64>,
    #[arg(long, alias = "max_retries")]
    max_retries: Option<u32>,
    #[arg(long, alias = "request_timeout_secs")]
    request_timeout_secs: Option<u64>,
}

impl ConfigOverrides {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        set!(
            temperature,
            max_tokens,
            samples_per_question,
            revision_steps,
            seed,
            provider_endpoint,
            model_name,
            system_prompt,
            instruction,
            choice_instruction,
            revision_candidates,
            concurrency_limit,
            max_retries,
            request_timeout_secs
        );
        if self.chain_token_ceiling.is_some() {
            c.chain_token_ceiling = self.chain_token_ceiling;
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Samples per question.
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    out_run: String,
    #[arg(long, default_value = "parallel", value_parser = parse_mode)]
    mode: Mode,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct ReviseArgs {
    #[arg(long)]
    run: String,
    #[arg(long)]
    steps: u32,
    /// Provider config; without it a simulated run uses its own dynamics
    /// and a sampled run reuses its stored config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Method {
    Select(Aggregator),
    Last,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "last" => Ok(Method::Last),
        other => other
            .parse::<Aggregator>()
            .map(Method::Select)
            .map_err(|_| {
                format!("unknown method {other:?}; valid methods: mv, shortest, smv, last")
            }),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_analysis(s: &str) -> Result<AnalysisKind, String> {
    s.parse()
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    run: String,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Use the first N samples of each question.
    #[arg(long, conflicts_with = "token_budget")]
    solutions: Option<usize>,
    /// Use samples in index order while their summed tokens fit.
    #[arg(long)]
    token_budget: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    run: String,
    #[arg(long, value_parser = parse_analysis)]
    analysis: AnalysisKind,
    /// Samples per question to use (default: the run's k).
    #[arg(long)]
    k: Option<usize>,
    /// Token limits for the truncation sweep.
    #[arg(long, value_delimiter = ',')]
    limits: Vec<u64>,
    #[arg(long, default_value = "wait")]
    marker: String,
    /// Count the marker only as a whole word.
    #[arg(long)]
    word_boundary: bool,
    /// Sample counts for parallel coverage.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Token budgets for sequential coverage and token-axis budget curves.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<u64>,
    /// Methods for budget curves.
    #[arg(long, value_delimiter = ',', value_parser = parse_aggregator)]
    methods: Vec<Aggregator>,
    /// Budget curves over summed tokens instead of solution counts.
    #[arg(long)]
    token_axis: bool,
}

fn parse_aggregator(s: &str) -> Result<Aggregator, String> {
    s.parse()
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML file of simulator parameters (defaults for missing keys).
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    questions: usize,
    #[arg(long, default_value_t = 5)]
    k: u32,
    #[arg(long, default_value_t = 0)]
    steps: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_run: String,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(message: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{message}"))
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let store = RunStore::new(&cli.runs_dir);
    let result = match cli.command {
        Command::Sample(a) => sample(&store, a),
        Command::Revise(a) => revise(&store, a),
        Command::Aggregate(a) => aggregate(&store, a),
        Command::Analyze(a) => analyze(&store, a),
        Command::Simulate(a) => simulate(&store, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>, base: RunConfig) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(usage),
        None => Ok(base),
    }
}

fn check_config(config: &RunConfig) -> CliResult {
    let problems = config.validate();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(usage(format!("invalid config: {}", problems.join("; "))))
    }
}

fn tag_of(tag: &str) -> &str {
    if tag.is_empty() {
        "default"
    } else {
        tag
    }
}

/// Records per dataset tag, then per question.
fn groups_by_tag(run: &LoadedRun) -> BTreeMap<String, BTreeMap<String, Vec<GenerationRecord>>> {
    let questions = question_map(&run.questions);
    let mut out: BTreeMap<String, BTreeMap<String, Vec<GenerationRecord>>> = BTreeMap::new();
    for (id, records) in group_by_question(&run.records) {
        let tag = questions
            .get(id.as_str())
            .map_or("default", |q| tag_of(&q.source_tag));
        out.entry(tag.to_string()).or_default().insert(id, records);
    }
    out
}

fn sample(store: &RunStore, args: SampleArgs) -> CliResult {
    let dataset = load_dataset(&args.dataset).map_err(usage)?;
    let mut config = load_config(args.config.as_deref(), RunConfig::default())?;
    args.overrides.apply(&mut config);
    if let Some(k) = args.k {
        config.samples_per_question = k;
    }
    check_config(&config)?;
    let provider = provider::from_config(&config).map_err(usage)?;
    let summary = run_benchmark(
        store,
        &args.out_run,
        &dataset,
        &config,
        args.mode,
        &provider,
    )
    .map_err(|e| match e {
        tts_core::orchestrator::OrchestratorError::InvalidConfig(_)
        | tts_core::orchestrator::OrchestratorError::EmptyDataset
        | tts_core::orchestrator::OrchestratorError::DatasetMismatch(_)
        | tts_core::orchestrator::OrchestratorError::ConfigMismatch { .. } => usage(e),
        other => Failure::Runtime(other.into()),
    })?;
    let run = store.load(&args.out_run)?;
    let k = config.samples_per_question as usize;
    out!("run {}", run.manifest.run_id);
    out!(
        "{:<16} {:>9} {:>8} {:>9} {:>11}",
        "dataset",
        "questions",
        "samples",
        "accuracy",
        "coverage@k"
    );
    for (tag, groups) in groups_by_tag(&run) {
        let records: Vec<&GenerationRecord> = groups.values().flatten().collect();
        let correct = records.iter().filter(|r| r.is_correct()).count();
        let acc = correct as f64 / records.len().max(1) as f64;
        let cov = coverage_parallel(
            &groups,
            k.min(groups.values().map(Vec::len).min().unwrap_or(0)),
        );
        out!(
            "{:<16} {:>9} {:>8} {:>9.4} {:>11.4}",
            tag,
            groups.len(),
            records.len(),
            acc,
            cov.coverage
        );
    }
    if !summary.failures.is_empty() {
        eprintln!(
            "{} generation(s) failed; rerun the same command to retry them",
            summary.failures.len()
        );
        if summary.new_records == 0 && summary.new_chain_steps == 0 {
            return Err(Failure::Runtime(anyhow!(
                "every provider request failed: {}",
                summary.failures[0].message
            )));
        }
    }
    Ok(())
}

fn print_step_accuracy(chains: &[RevisionChain]) {
    out!(
        "{:>5} {:>9} {:>8} {:>12}",
        "step",
        "accuracy",
        "chains",
        "mean_tokens"
    );
    for s in accuracy_by_step(chains) {
        out!(
            "{:>5} {:>9.4} {:>8} {:>12.1}",
            s.step,
            s.accuracy,
            s.n_chains,
            s.mean_cumulative_tokens
        );
    }
}

fn revise(store: &RunStore, args: ReviseArgs) -> CliResult {
    let manifest = store.manifest(&args.run)?;
    let simulated = matches!(manifest.source, RunSource::Simulated { .. });
    if simulated && args.config.is_none() {
        revise_simulated_run(store, &args.run, args.steps)?;
    } else {
        let run = store.load(&args.run)?;
        if run.records.is_empty() {
            return Err(Failure::Runtime(anyhow!(
                "run {:?} has no samples to revise",
                args.run
            )));
        }
        let mut config = load_config(args.config.as_deref(), manifest.config.clone())?;
        args.overrides.apply(&mut config);
        config.revision_steps = args.steps;
        config.samples_per_question = manifest.config.samples_per_question;
        check_config(&config)?;
        let provider = provider::from_config(&config).map_err(usage)?;
        let summary = run_benchmark(
            store,
            &args.run,
            &run.questions,
            &config,
            Mode::Both,
            &provider,
        )
        .map_err(|e| Failure::Runtime(e.into()))?;
        if !summary.failures.is_empty() {
            eprintln!(
                "{} chain(s) stopped on provider errors; rerun to resume them",
                summary.failures.len()
            );
            if summary.new_chain_steps == 0 {
                return Err(Failure::Runtime(anyhow!(
                    "every provider request failed: {}",
                    summary.failures[0].message
                )));
            }
        }
    }
    let run = store.load(&args.run)?;
    let chains: Vec<RevisionChain> = run
        .chains
        .into_iter()
        .map(|mut c| {
            c.steps.truncate(args.steps as usize + 1);
            c
        })
        .collect();
    print_step_accuracy(&chains);
    Ok(())
}

fn aggregate(store: &RunStore, args: AggregateArgs) -> CliResult {
    let run = store.load_sealed(&args.run)?;
    let k = run.manifest.config.samples_per_question as usize;
    let questions = question_map(&run.questions);
    let mut csv = String::from("dataset,method,axis,budget,accuracy,n_questions\n");
    let (name, axis, budget_value);
    let header = |unit: &str| {
        out!(
            "{:<16} {:<9} {:>9} {:>9}",
            "dataset",
            "method",
            "accuracy",
            unit
        )
    };
    match args.method {
        Method::Last => {
            if args.solutions.is_some() || args.token_budget.is_some() {
                return Err(usage(
                    "--method last takes no --solutions or --token-budget",
                ));
            }
            if run.chains.is_empty() {
                return Err(Failure::Runtime(anyhow!(
                    "run {:?} has no revision chains; run `revise` first",
                    args.run
                )));
            }
            let mut by_tag: BTreeMap<&str, Vec<RevisionChain>> = BTreeMap::new();
            for c in &run.chains {
                let tag = questions
                    .get(c.question_id.as_str())
                    .map_or("default", |q| tag_of(&q.source_tag));
                by_tag.entry(tag).or_default().push(c.clone());
            }
            let steps = run.chains.iter().map(|c| c.revisions()).max().unwrap_or(0);
            header("chains");
            for (tag, chains) in by_tag {
                let acc = last_revision_accuracy(&chains, &questions)?;
                out!("{tag:<16} {:<9} {:>9.4} {:>9}", "last", acc, chains.len());
                let _ = writeln!(csv, "{tag},last,steps,{steps},{acc},{}", chains.len());
            }
            name = "last".to_string();
            axis = "steps";
            budget_value = u64::from(steps);
        }
        Method::Select(method) => {
            let budget = match (args.solutions, args.token_budget) {
                (Some(n), _) if n == 0 || n > k => {
                    return Err(usage(format!(
                        "--solutions must be in 1..={k} (the run's k)"
                    )))
                }
                (Some(n), _) => Budget::Solutions(n),
                (None, Some(b)) => Budget::Tokens(b),
                (None, None) => Budget::Solutions(k),
            };
            (axis, budget_value) = match budget {
                Budget::Solutions(n) => ("solutions", n as u64),
                Budget::Tokens(b) => ("tokens", b),
            };
            header("questions");
            for (tag, groups) in groups_by_tag(&run) {
                let point = accuracy_vs_budget(&groups, &questions, method, &[budget])?.remove(0);
                out!(
                    "{tag:<16} {:<9} {:>9.4} {:>9}",
                    method.short_name(),
                    point.accuracy,
                    point.n_questions
                );
                let _ = writeln!(
                    csv,
                    "{tag},{},{axis},{budget_value},{},{}",
                    method.short_name(),
                    point.accuracy,
                    point.n_questions
                );
            }
            name = method.short_name().to_string();
        }
    }
    let summary = json!({"method": name, "axis": axis, "budget": budget_value});
    let path = store.write_analysis(
        &args.run,
        &format!("aggregate_{name}_{axis}{budget_value}"),
        &csv,
        Some(&summary),
    )?;
    out!("wrote {}", path.display());
    Ok(())
}

fn analyze(store: &RunStore, args: AnalyzeArgs) -> CliResult {
    let run = store.load_sealed(&args.run)?;
    let options = AnalysisOptions {
        k: args.k,
        limits: args.limits,
        marker: args.marker,
        word_boundary: args.word_boundary,
        ks: args.ks,
        budgets: args.budgets,
        methods: if args.methods.is_empty() {
            Aggregator::ALL.to_vec()
        } else {
            args.methods
        },
        token_axis: args.token_axis,
    };
    let output = run_analysis(args.analysis, &run, &options)?;
    let path = store.write_analysis(
        &args.run,
        args.analysis.name(),
        &output.csv,
        Some(&output.summary),
    )?;
    out!("{}", output.display);
    out!("wrote {}", path.display());
    Ok(())
}

fn simulate(store: &RunStore, args: SimulateArgs) -> CliResult {
    let params = match &args.params {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))
                .map_err(Failure::Usage)?;
            SimParams::from_toml(&text)
                .map_err(|e| usage(format!("invalid params {}: {e}", p.display())))?
        }
        None => SimParams::default(),
    };
    let problems = params.validate();
    if !problems.is_empty() {
        return Err(usage(format!("invalid params: {}", problems.join("; "))));
    }
    if args.questions == 0 || args.k == 0 {
        return Err(usage("--questions and --k must be ≥ 1"));
    }
    write_simulated_run(
        store,
        &args.out_run,
        &params,
        args.questions,
        args.k,
        args.steps,
        args.seed,
    )?;
    let dir = store.run_dir(&args.out_run);
    let mut bytes = fs::read(dir.join(RECORDS_FILE))?;
    bytes.extend(fs::read(dir.join(CHAINS_FILE))?);
    out!("run {}", args.out_run);
    out!(
        "{} questions, {} samples each, {} revision steps",
        args.questions,
        args.k,
        args.steps
    );
    out!("run digest {}", digest_hex(&bytes));
    Ok(())
}
