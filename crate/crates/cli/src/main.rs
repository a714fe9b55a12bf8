//! Command line front end for the refinement engine.
//!
//! Exit codes: 0 on success, 2 for validation problems, 3 when the backends
//! gave out, 4 for storage problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use promptforge::backends::{
    distill_prompt, generate_image, judge_similarity, load_prompt_assets, AssetError,
    BackendError, CallContext, CallError, CallPurpose,
};
use promptforge::domain::{DomainError, MediaType, TotalScore, WhitespaceTokenizer};
use promptforge::engine::{self, with_retries, EngineError, ResumeState, RunResult};
use promptforge::store::{
    build_bundle, build_report, load_reference_set, load_templates, read_ledger, replay,
    BackendSpec, ConfigError, Overrides, RunDocument, RunManifest, RunWriter, StoreError,
};
use promptforge::tasks::{
    compose_eval_prompt_with_separator, AttemptOutcome, FailureAccounting, TaskError, TaskKind,
};
use promptforge::Prompt;

#[derive(Parser)]
#[command(name = "promptforge", version, about = "Turns reference images into prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run described by a config document.
    Run(RunArgs),
    /// Continue an interrupted run from its ledger.
    Resume(ResumeArgs),
    /// Score a finished prompt against references using templates.
    Eval(EvalArgs),
    /// Ask the engineer to shorten a prompt.
    Distill(DistillArgs),
    /// Summarize a run ledger.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CliTask {
    Inversion,
    Subject,
    Style,
}

impl From<CliTask> for TaskKind {
    fn from(task: CliTask) -> TaskKind {
        match task {
            CliTask::Inversion => TaskKind::DirectInversion,
            CliTask::Subject => TaskKind::SubjectPersonalization,
            CliTask::Style => TaskKind::StylePersonalization,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Config document (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory of reference images.
    #[arg(long)]
    refs: PathBuf,
    /// Run seed; overrides the document.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel refinement streams (N).
    #[arg(long)]
    streams: Option<u32>,
    /// Iterations per stream (K).
    #[arg(long)]
    iters: Option<u32>,
    /// Candidates re-evaluated after the loop (C).
    #[arg(long = "top-c")]
    top_c: Option<u32>,
    /// Task kind; overrides the document.
    #[arg(long, value_enum)]
    task: Option<CliTask>,
    /// Force sequential stream execution.
    #[arg(long)]
    deterministic: bool,
    /// Run directory; defaults to runs/<run_id>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ResumeArgs {
    /// Path to the run's events.ndjson.
    #[arg(long)]
    ledger: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// The learned prompt to evaluate.
    #[arg(long)]
    prompt: String,
    /// Directory of reference images.
    #[arg(long)]
    refs: PathBuf,
    /// Template file, one template per line with a single {} slot.
    #[arg(long)]
    templates: PathBuf,
    /// Config document naming the backends; environment variables
    /// otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Class noun filled into each template slot.
    #[arg(long, default_value = "subject")]
    noun: String,
    /// Task kind; picks the separator between noun and prompt.
    #[arg(long, value_enum, default_value_t = CliTask::Subject)]
    task: CliTask,
    /// Generation attempts per template before it counts as failed.
    #[arg(long, default_value_t = 5)]
    retry_limit: u32,
}

#[derive(Args)]
struct DistillArgs {
    /// The prompt to shorten.
    #[arg(long)]
    prompt: String,
    /// Target length in tokens.
    #[arg(long = "max-tokens")]
    max_tokens: usize,
    /// Config document naming the backends; environment variables
    /// otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to the run's events.ndjson.
    #[arg(long)]
    ledger: PathBuf,
    /// Emit the machine-readable document instead of the table.
    #[arg(long)]
    json: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(err: ConfigError) -> Self {
        Failure { code: 2, message: err.to_string() }
    }
}

impl From<EngineError> for Failure {
    fn from(err: EngineError) -> Self {
        let code = match &err {
            EngineError::Validation { .. } => 2,
            EngineError::Asset(_) => 4,
            EngineError::AllIterationsFailed | EngineError::Aborted { .. } => 3,
            EngineError::Storage(_) => 4,
        };
        Failure { code, message: err.to_string() }
    }
}

impl From<StoreError> for Failure {
    fn from(err: StoreError) -> Self {
        Failure { code: 4, message: err.to_string() }
    }
}

impl From<AssetError> for Failure {
    fn from(err: AssetError) -> Self {
        Failure { code: 4, message: err.to_string() }
    }
}

impl From<CallError> for Failure {
    fn from(err: CallError) -> Self {
        Failure { code: 3, message: err.to_string() }
    }
}

impl From<DomainError> for Failure {
    fn from(err: DomainError) -> Self {
        Failure { code: 2, message: err.to_string() }
    }
}

impl From<TaskError> for Failure {
    fn from(err: TaskError) -> Self {
        Failure { code: 2, message: err.to_string() }
    }
}

/// Rust ignores SIGPIPE by default, so piping report output into a pager
/// that exits early would panic mid-print. Restore the default disposition
/// so the process just stops, the way other line-oriented tools do.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run_cmd(args),
        Command::Resume(args) => resume_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Distill(args) => distill_cmd(args),
        Command::Report(args) => report_cmd(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn config_base(path: &Path) -> PathBuf {
    let base = path.parent().filter(|p| !p.as_os_str().is_empty());
    let base = base.unwrap_or(Path::new("."));
    base.canonicalize().unwrap_or_else(|_| base.to_path_buf())
}

fn run_cmd(args: RunArgs) -> Result<(), Failure> {
    let doc = RunDocument::from_file(&args.config)?;
    let overrides = Overrides {
        task: args.task.map(TaskKind::from),
        seed: args.seed,
        streams: args.streams,
        iterations: args.iters,
        top_c: args.top_c,
        deterministic: args.deterministic.then_some(true),
    };
    let config = doc.resolve(&overrides)?;
    let refs = load_reference_set(&args.refs)?;

    let base = config_base(&args.config);
    let spec = doc.backends.absolutized(&base);
    let bundle = build_bundle(&spec, &base)?;
    let asset = load_prompt_assets(config.task)?;
    let sync = doc.sync.unwrap_or(false);
    let manifest = RunManifest::new(config.clone(), &refs, &asset, spec, sync);

    let run_dir = args
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(&manifest.run_id));
    let mut writer = match RunWriter::create(&run_dir, &manifest, &refs, sync) {
        Ok(writer) => writer,
        Err(StoreError::AlreadyExists(path)) => {
            return Err(Failure::validation(format!(
                "{} already holds a run; resume it with --ledger {}",
                run_dir.display(),
                path.display()
            )));
        }
        Err(err) => return Err(err.into()),
    };
    eprintln!("run {} -> {}", manifest.run_id, run_dir.display());

    let result = engine::run(&config, &refs, &bundle, &mut writer, ResumeState::default())?;
    print_result(&result);
    Ok(())
}

fn resume_cmd(args: ResumeArgs) -> Result<(), Failure> {
    let run_dir = args
        .ledger
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let replayed = replay(&run_dir)?;
    let manifest = replayed.manifest;
    let bundle = build_bundle(&manifest.backends, &run_dir)?;
    let mut writer =
        RunWriter::resume(&run_dir, replayed.valid_len, replayed.next_seq, manifest.sync)?;
    eprintln!(
        "resuming run {} at event {}",
        manifest.run_id, replayed.next_seq
    );

    let result = engine::run(
        &manifest.config,
        &replayed.references,
        &bundle,
        &mut writer,
        replayed.resume,
    )?;
    print_result(&result);
    Ok(())
}

fn print_result(result: &RunResult) {
    eprintln!(
        "{} iterations recorded, {} failed, shortlist of {}",
        result.records.len(),
        result.failed.len(),
        result.shortlist.len()
    );
    eprintln!(
        "best: stream {} iteration {} total {}",
        result.best.stream_id,
        result.best.iteration,
        format_total(&result.total)
    );
    println!("{}", result.best.prompt.text());
}

fn format_total(total: &TotalScore) -> String {
    if total.denom() == 1 {
        total.numer().to_string()
    } else {
        format!("{}/{}", total.numer(), total.denom())
    }
}

/// Backends from the config document, or from the environment alone when no
/// document is given.
fn backends_from(config: Option<&Path>) -> Result<(BackendSpec, PathBuf), Failure> {
    match config {
        Some(path) => {
            let doc = RunDocument::from_file(path)?;
            Ok((doc.backends, config_base(path)))
        }
        None => {
            let model = |key: &str| std::env::var(key).unwrap_or_else(|_| "default".to_string());
            Ok((
                BackendSpec::Http {
                    engineer_url: None,
                    generator_url: None,
                    judge_url: None,
                    engineer_model: model("PROMPTFORGE_ENGINEER_MODEL"),
                    generator_model: model("PROMPTFORGE_GENERATOR_MODEL"),
                    judge_model: model("PROMPTFORGE_JUDGE_MODEL"),
                    api_key: None,
                    timeout_secs: 120,
                    min_request_interval_ms: None,
                    generated_media_type: MediaType::Png,
                },
                PathBuf::from("."),
            ))
        }
    }
}

fn eval_cmd(args: EvalArgs) -> Result<(), Failure> {
    let refs = load_reference_set(&args.refs)?;
    let templates = load_templates(&args.templates)?;
    let (spec, base) = backends_from(args.config.as_deref())?;
    let bundle = build_bundle(&spec, &base)?;
    let task = TaskKind::from(args.task);
    let asset = load_prompt_assets(task)?;
    let counter = WhitespaceTokenizer;
    let learned = Prompt::new(&args.prompt, &counter)?;

    let mut accounting = FailureAccounting::new();
    let mut score_sum = 0u64;
    let mut score_count = 0u64;

    for (index, template) in templates.iter().enumerate() {
        let composed = compose_eval_prompt_with_separator(
            template,
            &args.noun,
            &learned,
            task.eval_separator(),
            &counter,
        )?;
        let ctx = CallContext {
            stream_id: 0,
            iteration: index as u32 + 1,
            purpose: CallPurpose::Eval { template_index: index as u32 },
        };

        let mut outcomes = Vec::new();
        let generated = with_retries(args.retry_limit, |_| {
            let result = generate_image(bundle.generator.as_ref(), &ctx, "", &composed);
            outcomes.push(match &result {
                Ok(_) => AttemptOutcome::Success,
                Err(BackendError::SafetyRejected(_)) => AttemptOutcome::SafetyRejected,
                Err(_) => AttemptOutcome::Errored,
            });
            result
        });
        let prompt_id = format!("template-{}", index + 1);
        accounting
            .record_generation_outcome(&prompt_id, &outcomes, args.retry_limit)
            .map_err(Failure::from)?;

        match generated {
            Ok((image, _)) => {
                let mut sum = 0u64;
                for reference in refs.iter() {
                    let verdict = judge_similarity(
                        bundle.judge.as_ref(),
                        &ctx,
                        asset.judge_text,
                        &image,
                        reference,
                    )?;
                    sum += verdict.rating.value() as u64;
                }
                let mean = sum as f64 / refs.len() as f64;
                score_sum += sum;
                score_count += refs.len() as u64;
                println!("template {:>2}  score {:>4.1}  {}", index + 1, mean, composed.text());
            }
            Err(exhausted) => {
                println!(
                    "template {:>2}  failed after {} attempts: {}",
                    index + 1,
                    exhausted.attempts,
                    exhausted.last_error
                );
            }
        }
    }

    if score_count > 0 {
        println!("mean score {:.2}", score_sum as f64 / score_count as f64);
    }
    println!(
        "prompts {}  failed {}  failure rate {:.1}%",
        accounting.prompts(),
        accounting.failures(),
        accounting.failure_rate() * 100.0
    );
    Ok(())
}

fn distill_cmd(args: DistillArgs) -> Result<(), Failure> {
    if args.max_tokens == 0 {
        return Err(Failure::validation("max-tokens must be at least 1"));
    }
    let (spec, base) = backends_from(args.config.as_deref())?;
    let bundle = build_bundle(&spec, &base)?;
    let counter = WhitespaceTokenizer;
    let prompt = Prompt::new(&args.prompt, &counter)?;
    let distilled = distill_prompt(bundle.engineer.as_ref(), &prompt, args.max_tokens, &counter)?;
    println!("{}", distilled.text());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<(), Failure> {
    let contents = read_ledger(&args.ledger)?;
    let report = build_report(&contents.events);
    if args.json {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Failure { code: 4, message: e.to_string() })?;
        println!("{json}");
    } else {
        print!("{report}");
    }
    Ok(())
}
