//! End-to-end driver: Stage 1 → Stage 2 → Stage 3 → dataset.
//!
//! Every random choice comes from a ChaCha stream keyed by (base seed, stage, item
//! index), so output does not depend on worker counts or scheduling. Stage 2 renders
//! seeds in fixed-size batches; each batch samples exemplars from the pool as it stood
//! before the batch, and successful scripts join the pool in seed order afterwards.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BackendMode, RunConfig, SandboxMode};
use crate::dataset::{self, DatasetManifest, DatasetStats, ManifestCounts, WriteOptions};
use crate::error::{Error, Result};
use crate::llm::{Gateway, LiveClient, ReplayCache};
use crate::mock::MockResponder;
use crate::model::{ChartRecord, ChartSeed, FilterStats, InstructionRecord};
use crate::sandbox::{Sandbox, ShimSandbox, StubSandbox};
use crate::stage1::{self, SamplingConfig, Stage1Options, ThemePool};
use crate::stage2::{self, DocCatalog, ExemplarPool, FigureOutcome, Stage2Context, Stage2PromptVariant};
use crate::stage3::{self, Stage3Context};

/// Default sandbox program looked up on PATH.
pub const SANDBOX_PROGRAM: &str = "sandbox-runner";

const STREAM_STAGE1: u64 = 1;
const STREAM_STAGE2: u64 = 2;
const STREAM_STAGE3: u64 = 3;
const STREAM_ABLATION: u64 = 4;

/// Random stream for item `index` of a stage.
pub fn stream_rng(base_seed: u64, stage: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

pub fn make_gateway(cfg: &RunConfig) -> Result<Gateway> {
    let cache = ReplayCache::new(&cfg.paths.cache_dir);
    let gateway = match cfg.backend {
        BackendMode::Live => Gateway::live(LiveClient::from_env()?, cache),
        BackendMode::Replay => {
            if !cfg.paths.cache_dir.is_dir() {
                return Err(Error::config(format!(
                    "replay cache {} does not exist",
                    cfg.paths.cache_dir.display()
                )));
            }
            Gateway::replay(cache)
        }
        BackendMode::Mock => Gateway::scripted(MockResponder).recording_into(cache),
    };
    Ok(if cfg.workers.rate_limit_per_minute > 0 {
        gateway.with_rate_limit(cfg.workers.rate_limit_per_minute)
    } else {
        gateway
    })
}

pub fn make_sandbox(cfg: &RunConfig) -> Box<dyn Sandbox> {
    match cfg.stage2.sandbox {
        SandboxMode::Stub => Box::new(StubSandbox),
        SandboxMode::Shim => Box::new(ShimSandbox::new(
            cfg.paths
                .sandbox_program
                .clone()
                .unwrap_or_else(|| PathBuf::from(SANDBOX_PROGRAM)),
        )),
    }
}

/// One structured line per stage outcome.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub chart_id: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Append-only JSONL run log. Safe to share across worker threads.
#[derive(Debug, Default)]
pub struct RunLog {
    out: Option<Mutex<BufWriter<File>>>,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(RunLog {
            out: Some(Mutex::new(BufWriter::new(File::create(path)?))),
        })
    }

    pub fn disabled() -> Self {
        RunLog::default()
    }

    pub fn log(&self, stage: &str, chart_id: &str, outcome: &str, detail: &str) {
        let entry = LogEntry {
            stage: stage.into(),
            chart_id: chart_id.into(),
            outcome: outcome.into(),
            detail: crate::sandbox::tail(detail, 500),
        };
        log::debug!("{stage} {chart_id}: {outcome}");
        if let Some(out) = &self.out {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            let mut w = out.lock().expect("run log lock");
            let _ = writeln!(w, "{line}");
        }
    }

    pub fn flush(&self) {
        if let Some(out) = &self.out {
            let _ = out.lock().expect("run log lock").flush();
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))
}

pub fn theme_pool(cfg: &RunConfig, gateway: &Gateway) -> Result<ThemePool> {
    if cfg.stage1.bootstrap_themes > 0 {
        stage1::bootstrap_themes(cfg.stage1.bootstrap_themes, gateway)
    } else {
        Ok(ThemePool::builtin())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Stage1Run {
    pub seeds: Vec<ChartSeed>,
    pub attempts: usize,
    pub failures: FilterStats,
}

/// Sample `cfg.n_seeds` specs and generate a table for each.
pub fn generate_seeds(cfg: &RunConfig, sampling: &SamplingConfig, themes: &ThemePool, gateway: &Gateway, log: &RunLog) -> Result<Stage1Run> {
    sampling.validate()?;
    let specs = (0..cfg.n_seeds)
        .map(|i| stage1::sample_spec(sampling, themes, &mut stream_rng(cfg.seed, STREAM_STAGE1, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let options = Stage1Options {
        max_attempts: cfg.stage1.max_attempts,
        enforce_trends: cfg.stage1.enforce_trends,
        model_id: cfg.model.clone(),
    };
    let outcomes: Vec<(String, Result<stage1::SeedOutcome>)> = pool(cfg.workers.stage1)?.install(|| {
        specs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                let id = format!("chart-{i:05}");
                let out = stage1::generate_seed(&id, spec, gateway, &options);
                (id, out)
            })
            .collect()
    });
    let mut run = Stage1Run {
        attempts: outcomes.len(),
        ..Default::default()
    };
    for (id, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                log.log("stage1", &id, "ok", &o.trend_warnings.join("; "));
                run.seeds.push(o.seed);
            }
            Err(e @ Error::GenerationFailed { .. }) => {
                let reason = stage1::failure_reason(&e);
                log.log("stage1", &id, reason, &e.to_string());
                run.failures.record(reason);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

#[derive(Clone, Debug, Default)]
pub struct Stage2Run {
    /// Successfully rendered charts, in seed order.
    pub charts: Vec<ChartRecord>,
    pub attempts: usize,
    pub failures: FilterStats,
    pub pool: ExemplarPool,
}

/// Render every seed with the full prompt; figures land under `figure_root`.
pub fn render_seeds(
    seeds: &[ChartSeed],
    cfg: &RunConfig,
    gateway: &Gateway,
    sandbox: &dyn Sandbox,
    figure_root: &Path,
    scratch_root: &Path,
    log: &RunLog,
) -> Result<Stage2Run> {
    let docs = DocCatalog::builtin();
    let mut ctx = Stage2Context::new(gateway, sandbox, &docs);
    ctx.k = cfg.stage2.icl;
    ctx.model_id = cfg.model.clone();
    ctx.render.timeout_s = cfg.stage2.timeout_s;
    ctx.render.scratch_root = scratch_root.to_path_buf();
    let workers = pool(cfg.workers.stage2)?;

    let mut run = Stage2Run::default();
    for (b, batch) in seeds.chunks(cfg.stage2.batch_size).enumerate() {
        let snapshot = run.pool.clone();
        let offset = b * cfg.stage2.batch_size;
        let outcomes: Vec<Result<FigureOutcome>> = workers.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(j, seed)| {
                    let mut rng = stream_rng(cfg.seed, STREAM_STAGE2, (offset + j) as u64);
                    stage2::generate_figure(seed, &snapshot, Stage2PromptVariant::Full, &ctx, figure_root, &mut rng)
                })
                .collect()
        });
        for (seed, outcome) in batch.iter().zip(outcomes) {
            run.attempts += 1;
            match outcome? {
                FigureOutcome::Rendered(record) => {
                    log.log("stage2", &seed.id, "ok", "");
                    stage2::update_pool(&mut run.pool, &record)?;
                    run.charts.push(record);
                }
                FigureOutcome::Filtered { reason, detail, .. } => {
                    log.log("stage2", &seed.id, reason, &detail);
                    run.failures.record(reason);
                }
            }
        }
    }
    Ok(run)
}

#[derive(Clone, Debug, Default)]
pub struct Stage3Run {
    pub records: Vec<InstructionRecord>,
    pub failures: FilterStats,
}

/// Generate instruction records for every rendered chart.
pub fn instruct_charts(
    charts: &[ChartRecord],
    cfg: &RunConfig,
    gateway: &Gateway,
    sandbox: &dyn Sandbox,
    scratch_root: &Path,
    log: &RunLog,
) -> Result<Stage3Run> {
    let mut ctx = Stage3Context::new(gateway, sandbox);
    ctx.k = cfg.stage3.icl;
    ctx.n_pairs = cfg.stage3.qa_pairs;
    ctx.model_id = cfg.model.clone();
    ctx.timeout_s = cfg.stage2.timeout_s;
    ctx.scratch_root = scratch_root.to_path_buf();
    let tasks = cfg.stage3.expanded_tasks();

    let outcomes: Vec<Result<(Vec<InstructionRecord>, FilterStats)>> = pool(cfg.workers.stage3)?.install(|| {
        charts
            .par_iter()
            .enumerate()
            .map(|(i, chart)| {
                let mut stats = FilterStats::default();
                let mut rng = stream_rng(cfg.seed, STREAM_STAGE3, i as u64);
                let records = stage3::synthesize(chart, &tasks, &ctx, &mut stats, &mut rng)?;
                Ok((records, stats))
            })
            .collect()
    });
    let mut run = Stage3Run::default();
    for (chart, outcome) in charts.iter().zip(outcomes) {
        let (records, stats) = outcome?;
        let detail: Vec<String> = stats.iter().map(|(r, n)| format!("{r}={n}")).collect();
        log.log("stage3", chart.id(), &format!("{} records", records.len()), &detail.join(", "));
        run.failures.merge(&stats);
        run.records.extend(records);
    }
    Ok(run)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildSummary {
    pub out_dir: PathBuf,
    pub run_log: PathBuf,
    pub manifest: DatasetManifest,
    pub stats: DatasetStats,
    pub elapsed_ms: u128,
}

impl BuildSummary {
    pub fn render_text(&self) -> String {
        let c = &self.manifest.counts;
        let mut out = format!(
            "dataset: {}\nrun log: {}\nmanifest digest: {}\n\nseeds: {} generated, {} filtered\nrender: {} of {} ok\nrecords: {}\n",
            self.out_dir.display(),
            self.run_log.display(),
            self.manifest.digest,
            c.seeds,
            c.stage1_failures.total(),
            c.rendered_ok,
            c.render_attempts,
            c.records_total
        );
        let filters: Vec<String> = [&c.stage1_failures, &c.render_failures, &c.stage3_failures]
            .into_iter()
            .flat_map(|f| f.iter().map(|(r, n)| format!("  {r}: {n}")))
            .collect();
        if !filters.is_empty() {
            out.push_str("filtered:\n");
            out.push_str(&filters.join("\n"));
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&self.stats.render_text());
        out
    }
}

/// Run the whole pipeline with backends built from `cfg`.
pub fn build(cfg: &RunConfig, force: bool) -> Result<BuildSummary> {
    cfg.validate()?;
    let gateway = make_gateway(cfg)?;
    let sandbox = make_sandbox(cfg);
    build_with(cfg, &gateway, sandbox.as_ref(), force)
}

/// Run the whole pipeline with the given backend and sandbox.
pub fn build_with(cfg: &RunConfig, gateway: &Gateway, sandbox: &dyn Sandbox, force: bool) -> Result<BuildSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = cfg.paths.out_dir.clone();
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    if !force && out_dir.join(dataset::MANIFEST_FILE).exists() {
        return Err(Error::Dataset(format!(
            "{} already contains a dataset; pass --force to replace it",
            out_dir.display()
        )));
    }
    let staging = tempfile::Builder::new().prefix(".chartforge-staging-").tempdir_in(&parent)?;
    let figure_root = staging.path().join("figures");
    let scratch = staging.path().join("scratch");
    let run_log_path = cfg.run_log_path();
    let log = RunLog::create(&run_log_path)?;

    let themes = theme_pool(cfg, gateway)?;
    let s1 = generate_seeds(cfg, &cfg.sampling(), &themes, gateway, &log)?;
    log::info!("stage 1: {} seeds, {} filtered", s1.seeds.len(), s1.failures.total());
    let s2 = render_seeds(&s1.seeds, cfg, gateway, sandbox, &figure_root, &scratch, &log)?;
    log::info!("stage 2: {} of {} rendered", s2.charts.len(), s2.attempts);
    let s3 = instruct_charts(&s2.charts, cfg, gateway, sandbox, &scratch, &log)?;
    log::info!("stage 3: {} records", s3.records.len());
    log.flush();

    let counts = ManifestCounts {
        seeds: s1.seeds.len(),
        stage1_failures: s1.failures,
        render_attempts: s2.attempts,
        rendered_ok: s2.charts.len(),
        render_failures: s2.failures,
        stage3_failures: s3.failures,
        ..Default::default()
    };
    let manifest = DatasetManifest::new(cfg.digest(), cfg.seed, counts);
    let manifest = dataset::write_dataset(&out_dir, &s2.charts, &s3.records, manifest, &figure_root, WriteOptions { force })?;
    let stats = dataset::compute_stats(&s2.charts, &s3.records);
    Ok(BuildSummary {
        out_dir,
        run_log: run_log_path,
        manifest,
        stats,
        elapsed_ms: started.elapsed().as_millis(),
    })
}

/// Warm an exemplar pool by rendering `n` fresh seeds with the full prompt, then run
/// every variant over `seeds` against that fixed pool.
pub fn run_stage2_ablation(
    seeds: &[ChartSeed],
    variants: &[Stage2PromptVariant],
    pool: &ExemplarPool,
    cfg: &RunConfig,
    gateway: &Gateway,
    sandbox: &dyn Sandbox,
    scratch_root: &Path,
) -> Result<stage2::AblationReport> {
    let docs = DocCatalog::builtin();
    let mut ctx = Stage2Context::new(gateway, sandbox, &docs);
    ctx.k = cfg.stage2.icl;
    ctx.model_id = cfg.model.clone();
    ctx.render.timeout_s = cfg.stage2.timeout_s;
    ctx.render.scratch_root = scratch_root.to_path_buf();
    let mut rng = stream_rng(cfg.seed, STREAM_ABLATION, 0);
    stage2::run_ablation(seeds, variants, pool, &ctx, &mut rng)
}
