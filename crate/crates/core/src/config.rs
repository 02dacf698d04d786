//! Run configuration: a TOML file with defaults for every key.
//!
//! ```toml
//! backend = "replay"        # live | replay | mock
//! model = "gpt-4"
//! seed = 7
//! n_seeds = 30
//!
//! [paths]
//! cache_dir = "cache"
//! out_dir = "dataset"
//!
//! [stage1]
//! rows = [3, 12]
//! value_cols = [1, 4]
//! chart_weights = { bar = 1.0, pie = 0.5 }   # unlisted types keep weight 1
//!
//! [stage2]
//! sandbox = "shim"           # shim | stub
//! timeout_s = 30
//!
//! [stage3]
//! tasks = ["qa", "chart_to_text"]
//! multiplicity = { qa = 2 }
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::llm::DEFAULT_MODEL;
use crate::model::{ChartType, TaskKind, TrendSpec};
use crate::sandbox::DEFAULT_TIMEOUT_S;
use crate::stage1::SamplingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    /// HTTP chat-completions endpoint; every exchange is recorded into the cache.
    Live,
    /// Cached exchanges only; a miss is an error.
    Replay,
    /// Built-in deterministic offline responder; exchanges are recorded into the cache.
    Mock,
}

impl BackendMode {
    pub fn name(self) -> &'static str {
        match self {
            BackendMode::Live => "live",
            BackendMode::Replay => "replay",
            BackendMode::Mock => "mock",
        }
    }
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(BackendMode::Live),
            "replay" => Ok(BackendMode::Replay),
            "mock" => Ok(BackendMode::Mock),
            other => Err(Error::config(format!("unknown backend `{other}` (live, replay, mock)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxMode {
    /// The external `sandbox-runner --json` process.
    Shim,
    /// In-process dry-run classifier; never executes code.
    Stub,
}

impl FromStr for SandboxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shim" => Ok(SandboxMode::Shim),
            "stub" => Ok(SandboxMode::Stub),
            other => Err(Error::config(format!("unknown sandbox `{other}` (shim, stub)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Sandbox program; `sandbox-runner` on PATH when unset.
    pub sandbox_program: Option<PathBuf>,
    /// Structured run log; `<out_dir>.run.jsonl` when unset.
    pub run_log: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            cache_dir: PathBuf::from("cache"),
            out_dir: PathBuf::from("dataset"),
            sandbox_program: None,
            run_log: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub rows: (usize, usize),
    pub value_cols: (usize, usize),
    /// Overrides on top of weight 1 for every chart type; 0 disables a type.
    pub chart_weights: BTreeMap<ChartType, f64>,
    pub max_attempts: usize,
    pub enforce_trends: bool,
    /// Extra themes requested from the model before sampling; 0 uses the built-in list.
    pub bootstrap_themes: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            rows: (3, 12),
            value_cols: (1, 4),
            chart_weights: BTreeMap::new(),
            max_attempts: 3,
            enforce_trends: false,
            bootstrap_themes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub icl: usize,
    pub timeout_s: u64,
    pub sandbox: SandboxMode,
    /// Seeds rendered against one exemplar-pool snapshot.
    pub batch_size: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            icl: crate::stage2::DEFAULT_ICL,
            timeout_s: DEFAULT_TIMEOUT_S,
            sandbox: SandboxMode::Shim,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub tasks: Vec<TaskKind>,
    /// Prompts per chart for a task; tasks not listed get one.
    pub multiplicity: BTreeMap<TaskKind, usize>,
    pub qa_pairs: usize,
    pub icl: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            tasks: TaskKind::ALL.to_vec(),
            multiplicity: BTreeMap::new(),
            qa_pairs: crate::stage3::DEFAULT_QA_PAIRS,
            icl: crate::stage3::DEFAULT_ICL,
        }
    }
}

impl Stage3Config {
    pub fn multiplicity_of(&self, task: TaskKind) -> usize {
        self.multiplicity.get(&task).copied().unwrap_or(1)
    }

    /// Task list with each task repeated by its multiplicity.
    pub fn expanded_tasks(&self) -> Vec<TaskKind> {
        self.tasks
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, self.multiplicity_of(t)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerConfig {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    /// Requests per minute across all workers; 0 for unlimited.
    pub rate_limit_per_minute: u32,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            stage1: 4,
            stage2: 4,
            stage3: 4,
            rate_limit_per_minute: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerance: f64,
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerance: crate::eval::DEFAULT_TOLERANCE,
            tau: crate::eval::DEFAULT_TAU,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendMode,
    pub model: String,
    pub seed: u64,
    pub n_seeds: usize,
    pub paths: PathsConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub workers: WorkerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendMode::Replay,
            model: DEFAULT_MODEL.to_string(),
            seed: 0,
            n_seeds: 30,
            paths: PathsConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            workers: WorkerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Read a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.paths.cache_dir);
        resolve(base, &mut cfg.paths.out_dir);
        if let Some(p) = cfg.paths.sandbox_program.as_mut() {
            if p.components().count() > 1 {
                resolve(base, p);
            }
        }
        if let Some(p) = cfg.paths.run_log.as_mut() {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn sampling(&self) -> SamplingConfig {
        let mut weights: BTreeMap<ChartType, f64> = ChartType::ALL.into_iter().map(|t| (t, 1.0)).collect();
        weights.extend(self.stage1.chart_weights.iter().map(|(&t, &w)| (t, w)));
        SamplingConfig {
            chart_weights: weights,
            rows: self.stage1.rows,
            value_cols: self.stage1.value_cols,
            trends: TrendSpec::builtin(),
            reference_tables: Vec::new(),
            reference_probability: 0.0,
        }
    }

    pub fn run_log_path(&self) -> PathBuf {
        self.paths.run_log.clone().unwrap_or_else(|| {
            let mut name = self.paths.out_dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".run.jsonl");
            self.paths.out_dir.with_file_name(name)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling().validate()?;
        if self.n_seeds == 0 {
            return Err(Error::config("n_seeds must be at least 1"));
        }
        if self.model.trim().is_empty() {
            return Err(Error::config("model id is empty"));
        }
        if self.stage1.max_attempts == 0 {
            return Err(Error::config("stage1.max_attempts must be at least 1"));
        }
        if self.stage2.timeout_s == 0 {
            return Err(Error::config("stage2.timeout_s must be positive"));
        }
        if self.stage2.batch_size == 0 {
            return Err(Error::config("stage2.batch_size must be at least 1"));
        }
        if self.stage3.tasks.is_empty() {
            return Err(Error::config("stage3.tasks is empty"));
        }
        if self.stage3.qa_pairs == 0 {
            return Err(Error::config("stage3.qa_pairs must be at least 1"));
        }
        if self.stage3.expanded_tasks().is_empty() {
            return Err(Error::config("every stage3 task has multiplicity 0"));
        }
        let w = &self.workers;
        if w.stage1 == 0 || w.stage2 == 0 || w.stage3 == 0 {
            return Err(Error::config("worker counts must be at least 1"));
        }
        if self.eval.tolerance.is_nan() || self.eval.tolerance < 0.0 {
            return Err(Error::config("eval.tolerance must be non-negative"));
        }
        if !(self.eval.tau > 0.0 && self.eval.tau <= 1.0) {
            return Err(Error::config("eval.tau must be in (0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the settings that determine a run's output. Paths and worker counts
    /// are excluded.
    pub fn digest(&self) -> String {
        let mut copy = self.clone();
        copy.paths = PathsConfig::default();
        copy.workers = WorkerConfig::default();
        let json = serde_json::to_string(&copy).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
