//! `oga-aid` command line. Exit codes: 0 success, 1 validation error,
//! 2 runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use oga_core::evalharness::{
    ablation_csv, ablation_markdown, ablation_table, collect_records, metrics_csv, read_records, summarize,
    write_records, EvalRecord,
};
use oga_core::pipeline::{
    load_bundle, write_case_outputs, write_frame_archive, CaseBundle, Clock, FixedClock, InputConfig,
    JsonlPromptLog, ObservationSetting, DEFAULT_RUNS,
};
use oga_core::synth::write_workspace;
use oga_core::wgs::{exact_decimal, validate_config, ReportTemplate, ScoringConfig};

use crate::api::{recover_interrupted, router, AppState, TOKEN_ENV};
use crate::clock::SystemClock;
use crate::engine::{load_providers, Engine, RunSettings};
use crate::store::{NewCase, Store, TrialUpload};

pub const NORMATIVE_ENV: &str = "OGA_NORMATIVE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "oga-aid", version, about = "Gait assessment report drafting with clinician review")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scoring configuration and print its total bounds
    ValidateConfig {
        /// Scoring TOML; the built-in table when omitted
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Validate a case directory and optionally import it into a store
    Ingest {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        clock: ClockArgs,
    },
    /// Draft reports for every trial of a case
    Run(RunArgs),
    /// Compute evaluation metrics from records, an ablation directory or a study
    Eval(EvalArgs),
    /// Serve the review API
    Serve(ServeArgs),
    /// Write a synthetic normative database and synthetic cases
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        cases: usize,
        /// Swing-phase lateral ankle excursion on the affected side
        #[arg(long, default_value_t = 0.0)]
        circumduction_mm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClockKind {
    Fixed,
    System,
}

#[derive(Debug, Args)]
pub struct ClockArgs {
    #[arg(long, value_enum, default_value_t = ClockKind::Fixed)]
    pub clock: ClockKind,
    /// Timestamp reported by the fixed clock
    #[arg(long, default_value = FixedClock::DEFAULT_TIMESTAMP)]
    pub timestamp: String,
}

impl ClockArgs {
    fn build(&self) -> Arc<dyn Clock> {
        match self.clock {
            ClockKind::Fixed => Arc::new(FixedClock(self.timestamp.clone())),
            ClockKind::System => Arc::new(SystemClock),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemplateArg {
    Scoring,
    Narrative,
}

impl From<TemplateArg> for ReportTemplate {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Scoring => ReportTemplate::ScoringTemplate,
            TemplateArg::Narrative => ReportTemplate::Narrative,
        }
    }
}

#[derive(Debug, Args)]
pub struct EngineArgs {
    /// Scoring TOML; the built-in table when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Normative database directory
    #[arg(long, env = NORMATIVE_ENV)]
    pub normative: Option<PathBuf>,
    /// TOML file with `[[provider]]` HTTP provider tables
    #[arg(long)]
    pub providers: Option<PathBuf>,
    /// auto, none, pass-through or command:<path>
    #[arg(long, default_value = "auto")]
    pub anonymizer: String,
    /// Model id sent to the provider; the provider id when omitted
    #[arg(long)]
    pub model: Option<String>,
    /// Directory with replacement prompt templates
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[command(flatten)]
    pub clock: ClockArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub case: PathBuf,
    /// Input flags: R, RD, RT or RTD
    #[arg(long, default_value = "RTD")]
    pub inputs: String,
    /// none, short, medium, long or explicit:<i,j,...>
    #[arg(long, default_value = "none")]
    pub obs: String,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, default_value = "mock")]
    pub provider: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds observation sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TemplateArg::Scoring)]
    pub template: TemplateArg,
    #[arg(long)]
    pub parallel_runs: bool,
    /// Prompt audit log; `<out>/<case>/prompts.jsonl` when omitted
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `sample,run,predicted,reference` CSV
    #[arg(long, conflicts_with_all = ["ablation", "cases"])]
    pub records: Option<PathBuf>,
    /// Directory holding one records CSV per configuration, named `<flags>.csv`
    #[arg(long, conflicts_with = "cases")]
    pub ablation: Option<PathBuf>,
    /// Case directories to run under every configuration
    #[arg(long, num_args = 1..)]
    pub cases: Vec<PathBuf>,
    /// Comma-separated configurations for a study
    #[arg(long, default_value = "R,RD,RT,RTD")]
    pub configs: String,
    #[arg(long, default_value = "none")]
    pub obs: String,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, default_value = "mock")]
    pub provider: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for metrics.csv, ablation.md, ablation.csv and records
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[command(flatten)]
    pub engine: EngineArgs,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .try_init();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::ValidateConfig { config } => validate_cmd(config.as_deref()),
        Command::Ingest { case, store, clock } => ingest_cmd(&case, store.as_deref(), &clock),
        Command::Run(args) => run_cmd(&args),
        Command::Eval(args) => eval_cmd(&args),
        Command::Serve(args) => serve_cmd(&args),
        Command::Synth {
            out,
            cases,
            circumduction_mm,
            seed,
            config,
        } => {
            let scoring = load_scoring(config.as_deref())?;
            let ws = write_workspace(&out, cases, circumduction_mm, seed, &scoring).map_err(runtime)?;
            println!("normative {}", ws.normative_dir.display());
            for dir in ws.case_dirs {
                println!("case {}", dir.display());
            }
            Ok(0)
        }
    }
}

fn load_scoring(path: Option<&Path>) -> Result<ScoringConfig, CliError> {
    let Some(path) = path else {
        return Ok(ScoringConfig::default_wgs());
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let config = ScoringConfig::from_toml_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let check = validate_config(&config);
    if !check.is_ok() {
        let lines: Vec<String> = check.violations.iter().map(|v| v.to_string()).collect();
        return Err(invalid(format!("{}: {}", path.display(), lines.join("; "))));
    }
    Ok(config)
}

fn validate_cmd(path: Option<&Path>) -> Result<i32, CliError> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            ScoringConfig::from_toml_str(&text).map_err(invalid)?
        }
        None => ScoringConfig::default_wgs(),
    };
    let check = validate_config(&config);
    let bounds = format!("min {} max {}", exact_decimal(check.min_total), exact_decimal(check.max_total));
    if check.is_ok() {
        println!("{bounds}, ok");
        return Ok(0);
    }
    for v in &check.violations {
        println!("violation: {v}");
    }
    println!("{bounds}, invalid");
    Ok(1)
}

fn ingest_cmd(case: &Path, store: Option<&Path>, clock: &ClockArgs) -> Result<i32, CliError> {
    let bundle = load_bundle(case).map_err(invalid)?;
    bundle.validate().map_err(invalid)?;
    let frames: usize = bundle
        .trials
        .iter()
        .map(|t| t.frontal.frames.len() + t.sagittal.frames.len())
        .sum();
    if let Some(root) = store {
        import_bundle(&Store::open(root, clock.build()).map_err(runtime)?, &bundle)?;
        println!("imported case {} into {}", bundle.id, root.display());
    }
    println!("case {}: {} trials, {frames} frames, ok", bundle.id, bundle.trials.len());
    Ok(0)
}

/// Creates a stored case from a bundle, trial by trial.
pub fn import_bundle(store: &Store, bundle: &CaseBundle) -> Result<(), CliError> {
    let to_cli = |e: crate::store::StoreError| match e {
        crate::store::StoreError::Io { .. } | crate::store::StoreError::Corrupt { .. } => runtime(e),
        other => invalid(other),
    };
    store
        .create_case(NewCase {
            id: bundle.id.clone(),
            synthetic: bundle.synthetic,
            reference_total: bundle.reference_total,
            profile: bundle.profile.clone(),
            observations: bundle.observations.clone(),
            alias: bundle.alias.clone(),
            mock_fixture: bundle.mock_fixture.clone(),
        })
        .map_err(to_cli)?;
    for t in &bundle.trials {
        store
            .attach_trial(
                &bundle.id,
                TrialUpload {
                    id: t.id.clone(),
                    reference_total: t.reference_total,
                    trajectory_csv: t.trajectory_csv.clone(),
                    frontal_zip: write_frame_archive(&t.frontal).map_err(runtime)?,
                    sagittal_zip: write_frame_archive(&t.sagittal).map_err(runtime)?,
                },
            )
            .map_err(to_cli)?;
    }
    Ok(())
}

/// Normative directory from the flag or environment, else the `normative`
/// sibling of the first case directory when present.
fn normative_dir(args: &EngineArgs, case: Option<&Path>) -> Option<PathBuf> {
    args.normative.clone().or_else(|| {
        let dir = case?.parent()?.join("normative");
        dir.is_dir().then_some(dir)
    })
}

fn build_engine(args: &EngineArgs, normative: Option<&Path>) -> Result<Engine, CliError> {
    let mut engine = Engine::new(load_scoring(args.config.as_deref())?, args.clock.build());
    engine.anonymizer = args.anonymizer.parse().map_err(invalid)?;
    engine.model = args.model.clone();
    if let Some(dir) = &args.prompts {
        engine.prompts = oga_core::agents::PromptLibrary::load_dir(dir).map_err(invalid)?;
    }
    if let Some(path) = &args.providers {
        engine = engine.with_http_providers(load_providers(path).map_err(invalid)?);
    }
    if let Some(dir) = normative {
        engine = engine.with_normative_dir(dir).map_err(invalid)?;
    }
    Ok(engine)
}

fn parse_input(flags: &str, obs: &str) -> Result<InputConfig, CliError> {
    let obs: ObservationSetting = obs.parse().map_err(invalid)?;
    Ok(InputConfig::parse_flags(flags).map_err(invalid)?.with_observations(obs))
}

fn check_provider(engine: &Engine, id: &str) -> Result<(), CliError> {
    if engine.has_provider(id) {
        return Ok(());
    }
    Err(invalid(format!(
        "unknown provider {id:?}; available: {}",
        engine.provider_ids().join(", ")
    )))
}

fn require_normative(input: &InputConfig, dir: &Option<PathBuf>) -> Result<(), CliError> {
    if input.trajectories && dir.is_none() {
        return Err(invalid(format!(
            "trajectories are enabled but no normative database was found; pass --normative or set {NORMATIVE_ENV}"
        )));
    }
    Ok(())
}

fn run_cmd(args: &RunArgs) -> Result<i32, CliError> {
    let input = parse_input(&args.inputs, &args.obs)?;
    if args.runs == 0 {
        return Err(invalid("--runs must be at least 1"));
    }
    let bundle = load_bundle(&args.case).map_err(invalid)?;
    bundle.validate().map_err(invalid)?;
    let normative = if input.trajectories {
        normative_dir(&args.engine, Some(&args.case))
    } else {
        None
    };
    require_normative(&input, &normative)?;
    let engine = build_engine(&args.engine, normative.as_deref())?;
    check_provider(&engine, &args.provider)?;
    let audit_path = args
        .audit
        .clone()
        .unwrap_or_else(|| args.out.join(&bundle.id).join("prompts.jsonl"));
    if audit_path.exists() {
        fs::remove_file(&audit_path).map_err(runtime)?;
    }
    let log = JsonlPromptLog::create(&audit_path).map_err(runtime)?;
    let settings = RunSettings {
        input,
        provider: args.provider.clone(),
        runs: args.runs,
        seed: args.seed,
        template: args.template.into(),
        parallel_runs: args.parallel_runs,
    };
    let run = engine.run(&bundle, &settings, Some(&log)).map_err(runtime)?;
    let paths = write_case_outputs(&args.out, &run).map_err(runtime)?;
    for p in &paths {
        println!("{}", p.display());
    }
    let failures = run.failures();
    for (o, e) in &failures {
        eprintln!("trial {} run {}: {e}", o.trial_id, o.run_index);
    }
    println!(
        "case {}: {} reports, {} failed runs",
        run.case_id,
        paths.len(),
        failures.len()
    );
    Ok(if failures.is_empty() { 0 } else { 2 })
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(runtime)?;
    fs::write(dir.join(name), text).map_err(runtime)
}

fn read_record_file(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    read_records(file).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn eval_cmd(args: &EvalArgs) -> Result<i32, CliError> {
    if let Some(path) = &args.records {
        let records = read_record_file(path)?;
        let s = summarize(&records).map_err(invalid)?;
        println!(
            "mae {:.2} max_ae {:.2} bias {:.2} below_mcid {} n {} m {}",
            s.mae,
            s.max_ae,
            s.bias,
            if s.below_mcid { "yes" } else { "no" },
            s.n,
            s.m
        );
        if let Some(out) = &args.out {
            let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("records");
            write_out(out, "metrics.csv", &metrics_csv(label, &s))?;
        }
        return Ok(0);
    }
    let results = if let Some(dir) = &args.ablation {
        ablation_inputs(dir)?
    } else if !args.cases.is_empty() {
        study(args)?
    } else {
        return Err(invalid("eval needs --records, --ablation or --cases"));
    };
    let rows = ablation_table(&results);
    let markdown = ablation_markdown(&rows);
    print!("{markdown}");
    if let Some(out) = &args.out {
        write_out(out, "ablation.md", &markdown)?;
        let csv = ablation_csv(&rows);
        write_out(out, "ablation.csv", &csv)?;
        write_out(out, "metrics.csv", &csv)?;
    }
    Ok(0)
}

/// Reads `<flags>.csv` files such as `R.csv` or `RTD.csv`.
fn ablation_inputs(dir: &Path) -> Result<BTreeMap<String, Vec<EvalRecord>>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))? {
        let path = entry.map_err(runtime)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Ok(config) = InputConfig::parse_flags(stem) else {
            continue;
        };
        out.insert(config.flags(), read_record_file(&path)?);
    }
    Ok(out)
}

/// Runs every case under every configuration and scores the totals.
fn study(args: &EvalArgs) -> Result<BTreeMap<String, Vec<EvalRecord>>, CliError> {
    let configs = args
        .configs
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|f| parse_input(f.trim(), &args.obs))
        .collect::<Result<Vec<_>, _>>()?;
    if args.runs == 0 {
        return Err(invalid("--runs must be at least 1"));
    }
    let bundles = args
        .cases
        .iter()
        .map(|dir| {
            let b = load_bundle(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
            b.validate().map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
            Ok(b)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let normative = if configs.iter().any(|c| c.trajectories) {
        normative_dir(&args.engine, args.cases.first().map(PathBuf::as_path))
    } else {
        None
    };
    if let Some(c) = configs.iter().find(|c| c.trajectories) {
        require_normative(c, &normative)?;
    }
    let engine = build_engine(&args.engine, normative.as_deref())?;
    check_provider(&engine, &args.provider)?;
    let mut out = BTreeMap::new();
    for config in configs {
        let settings = RunSettings {
            input: config.clone(),
            provider: args.provider.clone(),
            runs: args.runs,
            seed: args.seed,
            template: ReportTemplate::ScoringTemplate,
            parallel_runs: false,
        };
        let runs = std::thread::scope(|s| {
            let handles: Vec<_> = bundles
                .iter()
                .map(|b| s.spawn(|| engine.run(b, &settings, None)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("case thread panicked"))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(runtime)?;
        let (records, warnings) = collect_records(&runs);
        for w in warnings {
            eprintln!("{}: {w}", config.label());
        }
        if let Some(dir) = &args.out {
            let dir = dir.join("records");
            fs::create_dir_all(&dir).map_err(runtime)?;
            let file = fs::File::create(dir.join(format!("{}.csv", config.flags()))).map_err(runtime)?;
            write_records(file, &records).map_err(runtime)?;
        }
        out.insert(config.flags(), records);
    }
    Ok(out)
}

fn serve_cmd(args: &ServeArgs) -> Result<i32, CliError> {
    let normative = normative_dir(&args.engine, None).or_else(|| {
        let dir = args.store.join("normative");
        dir.is_dir().then_some(dir)
    });
    let engine = build_engine(&args.engine, normative.as_deref())?;
    let store = Store::open(&args.store, args.engine.clock.build()).map_err(runtime)?;
    let interrupted = recover_interrupted(&store).map_err(runtime)?;
    if interrupted > 0 {
        tracing::warn!(interrupted, "marked unfinished runs as failed");
    }
    let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    if token.is_none() {
        tracing::warn!("{TOKEN_ENV} is not set; the API accepts unauthenticated requests");
    }
    let state = Arc::new(AppState { store, engine, token });
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .map_err(|e| runtime(format!("bind {}: {e}", args.bind)))?;
        let addr = listener.local_addr().map_err(runtime)?;
        println!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(runtime)
    })?;
    Ok(0)
}
