use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use chartforge::config::{BackendMode, RunConfig, SandboxMode};
use chartforge::dataset;
use chartforge::eval::{self, EvalScore};
use chartforge::model::{ChartRecord, ChartSeed, ChartType, InstructionRecord, TaskKind};
use chartforge::pipeline::{self, RunLog};
use chartforge::scoring;
use chartforge::stage2::{ExemplarPool, Stage2PromptVariant};

// Writes to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! sayln {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "chartforge", version, about = "Synthetic chart instruction-tuning data pipeline")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: sample specs and generate tables plus descriptions.
    Generate(GenerateArgs),
    /// Stage 2: generate plotting scripts and render them.
    Render(RenderArgs),
    /// Stage 3: generate instruction records for rendered charts.
    Instruct(InstructArgs),
    /// Run all stages and write a dataset directory.
    Build(BuildArgs),
    /// Task and chart-type distribution of a dataset.
    Stats(StatsArgs),
    /// Split a dataset's records into train/test files by chart.
    Split(SplitArgs),
    /// Score predictions.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Prompt ablations.
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Theme pool utilities.
    #[command(subcommand)]
    Themes(ThemesCommand),
    /// Print the effective configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Run configuration file (TOML). Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<BackendMode>,
    /// Replay cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl BackendArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        if let Some(c) = &self.cache {
            cfg.paths.cache_dir = c.clone();
        }
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct SandboxArgs {
    /// Per-script wall-clock limit in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    sandbox: Option<SandboxMode>,
    /// Sandbox runner program (default: sandbox-runner on PATH).
    #[arg(long)]
    sandbox_program: Option<PathBuf>,
}

impl SandboxArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.timeout {
            cfg.stage2.timeout_s = t;
        }
        if let Some(s) = self.sandbox {
            cfg.stage2.sandbox = s;
        }
        if let Some(p) = &self.sandbox_program {
            cfg.paths.sandbox_program = Some(p.clone());
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated chart types to sample from (default: all).
    #[arg(long, value_delimiter = ',')]
    chart_types: Vec<ChartType>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// In-context examples per prompt.
    #[arg(long)]
    icl: Option<usize>,
    #[command(flatten)]
    sandbox: SandboxArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct InstructArgs {
    /// Directory of rendered charts.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<TaskKind>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sandbox: SandboxArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct BuildArgs {
    /// Output dataset directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Replace an existing dataset.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(flatten)]
    sandbox: SandboxArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct StatsArgs {
    dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct SplitArgs {
    dir: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Also write the JSON report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Relaxed accuracy of QA answers.
    Qa {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_TOLERANCE)]
        tol: f64,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Mean BLEU-4 of generated text against references.
    Bleu {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Table-similarity precision, recall and F1 of extracted tables.
    Extraction {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_TAU)]
        tau: f64,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Evaluator-model rubric scores.
    Rubric {
        #[arg(long)]
        task: TaskKind,
        /// Directory (or file) of runs to score.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Render success rate per Stage-2 prompt variant.
    Stage2 {
        #[arg(long, value_delimiter = ',', default_value = "full,no_icl,no_doc,no_both")]
        variants: Vec<Stage2PromptVariant>,
        /// Seeds per variant.
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Seeds rendered first to fill the exemplar pool.
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Use these seeds instead of generating new ones (warm-up seeds come first).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[command(flatten)]
        sandbox: SandboxArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Subcommand)]
enum ThemesCommand {
    /// Ask the model for a theme list.
    Bootstrap {
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    backend: BackendArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Render(a) => render(a),
        Command::Instruct(a) => instruct(a),
        Command::Build(a) => build(a),
        Command::Stats(a) => {
            let stats = dataset::stats(&a.dir)?;
            match a.format {
                Format::Text => say!("{}", stats.render_text()),
                Format::Json => sayln!("{}", serde_json::to_string_pretty(&stats)?),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Split(a) => {
            let out = dataset::split(&a.dir, (a.train, a.test), a.seed)?;
            sayln!(
                "train: {} charts, {} records -> {}\ntest: {} charts, {} records -> {}",
                out.train_charts.len(),
                out.train_records,
                out.train_path.display(),
                out.test_charts.len(),
                out.test_records,
                out.test_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(e) => evaluate(e),
        Command::Ablate(AblateCommand::Stage2 {
            variants,
            n,
            warmup,
            input,
            sandbox,
            backend,
            report,
        }) => ablate(variants, n, warmup, input, sandbox, backend, report),
        Command::Themes(ThemesCommand::Bootstrap { count, out, backend }) => {
            let cfg = backend.run_config()?;
            let gateway = pipeline::make_gateway(&cfg)?;
            let pool = chartforge::stage1::bootstrap_themes(count, &gateway)?;
            let text: String = pool.themes.iter().map(|t| format!("{t}\n")).collect();
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => say!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Config(a) => {
            say!("{}", a.backend.run_config()?.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        writeln!(out, "{}", serde_json::to_string(item)?)?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn log_for(path: &Path) -> Result<RunLog> {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.jsonl");
    Ok(RunLog::create(&path.with_file_name(name))?)
}

fn print_filters(label: &str, stats: &chartforge::model::FilterStats) {
    for (reason, n) in stats.iter() {
        eprintln!("{label} filtered {reason}: {n}");
    }
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let mut cfg = a.backend.run_config()?;
    if let Some(n) = a.n {
        cfg.n_seeds = n;
    }
    if !a.chart_types.is_empty() {
        cfg.stage1.chart_weights = ChartType::ALL
            .into_iter()
            .map(|t| (t, if a.chart_types.contains(&t) { 1.0 } else { 0.0 }))
            .collect();
    }
    cfg.validate()?;
    let gateway = pipeline::make_gateway(&cfg)?;
    let themes = pipeline::theme_pool(&cfg, &gateway)?;
    let run = pipeline::generate_seeds(&cfg, &cfg.sampling(), &themes, &gateway, &log_for(&a.out)?)?;
    write_jsonl(&a.out, &run.seeds)?;
    print_filters("stage1", &run.failures);
    sayln!("{} of {} seeds written to {}", run.seeds.len(), run.attempts, a.out.display());
    Ok(if run.seeds.is_empty() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn render(a: RenderArgs) -> Result<ExitCode> {
    let mut cfg = a.backend.run_config()?;
    a.sandbox.apply(&mut cfg);
    if let Some(k) = a.icl {
        cfg.stage2.icl = k;
    }
    cfg.validate()?;
    let seeds: Vec<ChartSeed> = read_jsonl(&a.input)?;
    if seeds.is_empty() {
        bail!("{} holds no seeds", a.input.display());
    }
    let gateway = pipeline::make_gateway(&cfg)?;
    let sandbox = pipeline::make_sandbox(&cfg);
    fs::create_dir_all(&a.out)?;
    let staging = tempfile::tempdir_in(&a.out)?;
    let figures = staging.path().join("figures");
    let scratch = staging.path().join("scratch");
    let log = log_for(&a.out)?;
    let run = pipeline::render_seeds(&seeds, &cfg, &gateway, sandbox.as_ref(), &figures, &scratch, &log)?;
    log.flush();
    for chart in &run.charts {
        dataset::write_chart(&a.out, chart, &figures)?;
    }
    print_filters("stage2", &run.failures);
    let statuses: Vec<_> = run
        .charts
        .iter()
        .map(|c| c.render_status)
        .chain(std::iter::repeat_n(chartforge::model::RenderStatus::ExecError, run.attempts - run.charts.len()))
        .collect();
    sayln!(
        "rendered {} of {} ({}%) into {}",
        run.charts.len(),
        run.attempts,
        eval::format_percentage(eval::success_rate(&statuses)?),
        a.out.display()
    );
    Ok(if run.charts.is_empty() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn instruct(a: InstructArgs) -> Result<ExitCode> {
    let mut cfg = a.backend.run_config()?;
    a.sandbox.apply(&mut cfg);
    if !a.tasks.is_empty() {
        cfg.stage3.tasks = a.tasks.clone();
    }
    cfg.validate()?;
    let charts: Vec<ChartRecord> = dataset::read_charts(&a.input)?;
    if charts.is_empty() {
        bail!("no rendered charts under {}", a.input.display());
    }
    let gateway = pipeline::make_gateway(&cfg)?;
    let sandbox = pipeline::make_sandbox(&cfg);
    let scratch = tempfile::tempdir()?;
    let run = pipeline::instruct_charts(&charts, &cfg, &gateway, sandbox.as_ref(), scratch.path(), &log_for(&a.out)?)?;
    write_jsonl::<InstructionRecord>(&a.out, &run.records)?;
    print_filters("stage3", &run.failures);
    sayln!("{} records from {} charts written to {}", run.records.len(), charts.len(), a.out.display());
    Ok(if run.records.is_empty() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn build(a: BuildArgs) -> Result<ExitCode> {
    let mut cfg = a.backend.run_config()?;
    a.sandbox.apply(&mut cfg);
    if let Some(out) = a.out {
        cfg.paths.out_dir = out;
    }
    if let Some(n) = a.n {
        cfg.n_seeds = n;
    }
    let summary = pipeline::build(&cfg, a.force)?;
    match a.format {
        Format::Text => say!("{}", summary.render_text()),
        Format::Json => sayln!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(if summary.manifest.counts.records_total == 0 {
        eprintln!("error: no instruction records were produced");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn emit<T: Serialize>(report: &ReportArgs, json: &T, text: String) -> Result<ExitCode> {
    let body = serde_json::to_string_pretty(json)?;
    if let Some(p) = &report.report {
        fs::write(p, &body).with_context(|| format!("writing {}", p.display()))?;
    }
    match report.format {
        Format::Text => say!("{text}"),
        Format::Json => sayln!("{body}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(command: EvalCommand) -> Result<ExitCode> {
    match command {
        EvalCommand::Qa { pred, gold, tol, report } => {
            let preds = scoring::load_qa(&pred, &gold)?;
            let scores = vec![scoring::score_qa(&preds, tol)?];
            emit(&report, &scores, eval::render_scores_text(&scores))
        }
        EvalCommand::Bleu { pred, gold, report } => {
            let preds = scoring::load_qa(&pred, &gold)?;
            let scores = vec![scoring::score_bleu(&preds)?];
            emit(&report, &scores, eval::render_scores_text(&scores))
        }
        EvalCommand::Extraction { pred, gold, tau, report } => {
            let r = scoring::score_extraction_dirs(&pred, &gold, tau)?;
            emit(&report, &r, eval::render_scores_text(&r.scores()))
        }
        EvalCommand::Rubric {
            task,
            pred,
            workers,
            backend,
            report,
        } => {
            let cfg = backend.run_config()?;
            let runs = scoring::load_rubric_runs(&pred)?;
            let gateway = pipeline::make_gateway(&cfg)?;
            let r = scoring::score_rubric_runs(&gateway, task, &runs, &cfg.model, workers)?;
            let scores: Vec<EvalScore> = vec![r.score()];
            emit(&report, &r, eval::render_scores_text(&scores))
        }
    }
}

fn ablate(
    variants: Vec<Stage2PromptVariant>,
    n: usize,
    warmup: usize,
    input: Option<PathBuf>,
    sandbox_args: SandboxArgs,
    backend: BackendArgs,
    report: ReportArgs,
) -> Result<ExitCode> {
    let mut cfg = backend.run_config()?;
    sandbox_args.apply(&mut cfg);
    cfg.n_seeds = n + warmup;
    cfg.validate()?;
    let gateway = pipeline::make_gateway(&cfg)?;
    let sandbox = pipeline::make_sandbox(&cfg);
    let seeds: Vec<ChartSeed> = match input {
        Some(p) => read_jsonl(&p)?,
        None => {
            let themes = pipeline::theme_pool(&cfg, &gateway)?;
            pipeline::generate_seeds(&cfg, &cfg.sampling(), &themes, &gateway, &RunLog::disabled())?.seeds
        }
    };
    if seeds.len() <= warmup {
        bail!("need more than {warmup} seeds, have {}", seeds.len());
    }
    let (warm, test) = seeds.split_at(warmup);
    let test = &test[..test.len().min(n)];
    let scratch = tempfile::tempdir()?;
    let pool = if warm.is_empty() {
        ExemplarPool::default()
    } else {
        let figures = scratch.path().join("warmup");
        pipeline::render_seeds(warm, &cfg, &gateway, sandbox.as_ref(), &figures, scratch.path(), &RunLog::disabled())?.pool
    };
    let r = pipeline::run_stage2_ablation(test, &variants, &pool, &cfg, &gateway, sandbox.as_ref(), scratch.path())?;
    emit(&report, &r, r.render_text())
}
