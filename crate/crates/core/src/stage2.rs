//! Stage 2: turn a seed's table into a plotting script and render it.
//!
//! The prompt carries the data inline, curated documentation for the plotting
//! functions of the chart type, and scripts that already rendered successfully. Only
//! scripts that execute and leave a PNG behind survive; their code then feeds the
//! exemplar pool for later prompts.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence;
use crate::llm::{ChatRequest, Gateway, DEFAULT_MODEL, GENERATION_TEMPERATURE};
use crate::model::{ChartRecord, ChartSeed, ChartType, FilterStats, RenderStatus};
use crate::sandbox::{has_png_magic, Sandbox, SandboxRequest, DEFAULT_TIMEOUT_S, FIGURE_FILE};

pub const SYSTEM_PROMPT: &str = "You are an expert Python data-visualisation programmer. \
You write complete, runnable Matplotlib scripts.";

pub const DEFAULT_ICL: usize = 2;
pub const POOL_CAP_PER_TYPE: usize = 200;

/// Reference success rates of the prompt variants, shown as context in ablation reports.
pub const REFERENCE_RATES: [(Stage2PromptVariant, f64); 4] = [
    (Stage2PromptVariant::Full, 85.0),
    (Stage2PromptVariant::NoIcl, 43.0),
    (Stage2PromptVariant::NoDoc, 65.0),
    (Stage2PromptVariant::NoBoth, 28.0),
];

const SELF_CONTAINED: &str =
    "The script must be self-contained and executable without the need for external files: define all data inline.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub chart_type: ChartType,
    pub script: String,
    /// Render success is the only quality gate applied.
    pub quality: bool,
}

/// Scripts that rendered successfully, kept per chart type with oldest-first eviction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPool {
    by_type: BTreeMap<ChartType, VecDeque<Exemplar>>,
    cap_per_type: usize,
}

impl Default for ExemplarPool {
    fn default() -> Self {
        ExemplarPool::with_cap(POOL_CAP_PER_TYPE)
    }
}

impl ExemplarPool {
    pub fn with_cap(cap_per_type: usize) -> Self {
        ExemplarPool {
            by_type: BTreeMap::new(),
            cap_per_type: cap_per_type.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.by_type.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, chart_type: ChartType) -> usize {
        self.by_type.get(&chart_type).map_or(0, VecDeque::len)
    }

    pub fn entries(&self, chart_type: ChartType) -> impl Iterator<Item = &Exemplar> {
        self.by_type.get(&chart_type).into_iter().flatten()
    }

    /// Up to `k` exemplars: same chart type first, then any other type.
    pub fn sample<R: Rng + ?Sized>(&self, chart_type: ChartType, k: usize, rng: &mut R) -> Vec<Exemplar> {
        let same: Vec<&Exemplar> = self.entries(chart_type).collect();
        let mut picked: Vec<Exemplar> = same.choose_multiple(rng, k.min(same.len())).map(|e| (*e).clone()).collect();
        if picked.len() < k {
            let others: Vec<&Exemplar> = self
                .by_type
                .iter()
                .filter(|(t, _)| **t != chart_type)
                .flat_map(|(_, v)| v.iter())
                .collect();
            let need = (k - picked.len()).min(others.len());
            picked.extend(others.choose_multiple(rng, need).map(|e| (*e).clone()));
        }
        picked
    }

    fn push(&mut self, exemplar: Exemplar) {
        let cap = self.cap_per_type;
        let queue = self.by_type.entry(exemplar.chart_type).or_default();
        queue.push_back(exemplar);
        while queue.len() > cap {
            queue.pop_front();
        }
    }
}

/// Add a rendered chart's script to the pool.
pub fn update_pool(pool: &mut ExemplarPool, record: &ChartRecord) -> Result<()> {
    if !record.is_ok() {
        return Err(Error::contract(format!(
            "chart {} has render status {}; only rendered scripts enter the exemplar pool",
            record.id(),
            record.render_status.name()
        )));
    }
    pool.push(Exemplar {
        chart_type: record.chart_type(),
        script: record.script.clone(),
        quality: true,
    });
    Ok(())
}

/// Documentation excerpts per chart type, shipped with the crate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocCatalog {
    generic: String,
    by_type: BTreeMap<ChartType, String>,
}

impl DocCatalog {
    pub fn builtin() -> Self {
        let by_type = [
            (ChartType::Bar, include_str!("../assets/docs/bar.md")),
            (ChartType::Line, include_str!("../assets/docs/line.md")),
            (ChartType::Pie, include_str!("../assets/docs/pie.md")),
            (ChartType::Funnel, include_str!("../assets/docs/funnel.md")),
            (ChartType::Gantt, include_str!("../assets/docs/gantt.md")),
            (ChartType::Heatmap, include_str!("../assets/docs/heatmap.md")),
            (ChartType::Scatter, include_str!("../assets/docs/scatter.md")),
            (ChartType::Box, include_str!("../assets/docs/box.md")),
            (ChartType::Candlestick, include_str!("../assets/docs/candlestick.md")),
            (ChartType::Area, include_str!("../assets/docs/area.md")),
        ]
        .into_iter()
        .map(|(t, s)| (t, s.to_string()))
        .collect();
        DocCatalog {
            generic: include_str!("../assets/docs/generic.md").to_string(),
            by_type,
        }
    }

    pub fn new(generic: impl Into<String>, by_type: BTreeMap<ChartType, String>) -> Self {
        DocCatalog {
            generic: generic.into(),
            by_type,
        }
    }

    /// Type-specific excerpt followed by the shared one.
    pub fn excerpt(&self, chart_type: ChartType) -> String {
        match self.by_type.get(&chart_type) {
            Some(specific) => format!("{}\n{}", specific.trim_end(), self.generic.trim_end()),
            None => self.generic.trim_end().to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2PromptVariant {
    Full,
    NoIcl,
    NoDoc,
    NoBoth,
}

impl Stage2PromptVariant {
    pub const ALL: [Stage2PromptVariant; 4] = [
        Stage2PromptVariant::Full,
        Stage2PromptVariant::NoIcl,
        Stage2PromptVariant::NoDoc,
        Stage2PromptVariant::NoBoth,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage2PromptVariant::Full => "full",
            Stage2PromptVariant::NoIcl => "no_icl",
            Stage2PromptVariant::NoDoc => "no_doc",
            Stage2PromptVariant::NoBoth => "no_both",
        }
    }

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            Stage2PromptVariant::Full => "Original",
            Stage2PromptVariant::NoIcl => "w/o In-context",
            Stage2PromptVariant::NoDoc => "w/o Documentation",
            Stage2PromptVariant::NoBoth => "w/o Both",
        }
    }

    pub fn includes_docs(self) -> bool {
        matches!(self, Stage2PromptVariant::Full | Stage2PromptVariant::NoIcl)
    }

    pub fn includes_exemplars(self) -> bool {
        matches!(self, Stage2PromptVariant::Full | Stage2PromptVariant::NoDoc)
    }
}

impl fmt::Display for Stage2PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage2PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage2PromptVariant::ALL
            .into_iter()
            .find(|v| v.tag() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown prompt variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Prompt {
    pub system_text: String,
    pub user_text: String,
    pub exemplars_used: usize,
    pub docs_included: bool,
}

impl Stage2Prompt {
    pub fn to_request(&self, model_id: &str) -> ChatRequest {
        ChatRequest::new(&self.system_text, &self.user_text)
            .with_model(model_id)
            .with_temperature(GENERATION_TEMPERATURE)
            .with_max_tokens(3000)
    }
}

pub fn build_stage2_prompt<R: Rng + ?Sized>(
    seed: &ChartSeed,
    docs: &DocCatalog,
    pool: &ExemplarPool,
    k: usize,
    variant: Stage2PromptVariant,
    rng: &mut R,
) -> Stage2Prompt {
    let chart_type = seed.spec.chart_type;
    let mut user = format!("Write a Python script that draws a {chart_type} chart of the data below with Matplotlib.\n\n");
    user.push_str("Data (embed these values directly in the script):\n");
    user.push_str(&fence::wrap("csv", &seed.table.to_csv()));
    user.push_str(&format!("\n\nData description: {}\n", seed.data_description.trim()));
    user.push_str(&format!("Figure intent: {}\n", seed.figure_intent.trim()));

    let docs_included = variant.includes_docs();
    if docs_included {
        user.push_str("\nDocumentation of functions you can use:\n");
        user.push_str(&fence::wrap("text", &docs.excerpt(chart_type)));
        user.push('\n');
    }

    let exemplars = if variant.includes_exemplars() {
        pool.sample(chart_type, k, rng)
    } else {
        Vec::new()
    };
    if !exemplars.is_empty() {
        user.push_str("\nExamples of scripts that ran successfully (for other data; do not copy their values):\n");
        for (i, ex) in exemplars.iter().enumerate() {
            user.push_str(&format!("Example {} ({} chart):\n", i + 1, ex.chart_type));
            user.push_str(&fence::wrap("python", &ex.script));
            user.push('\n');
        }
    }

    user.push_str(&format!(
        "\nRequirements:\n\
- {SELF_CONTAINED}\n\
- Give the chart a title, axis labels where the chart has axes, a legend, and at least one text annotation.\n\
- Make the styling your own: pick color schemes and line types that suit the data instead of the defaults.\n\
- Save the figure with plt.savefig(\"{FIGURE_FILE}\") to the current working directory and do not call plt.show().\n\n\
Answer with the complete script in a single ```python fenced block.\n"
    ));

    Stage2Prompt {
        system_text: SYSTEM_PROMPT.to_string(),
        user_text: user,
        exemplars_used: exemplars.len(),
        docs_included,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractedScript {
    pub script: String,
    pub warnings: Vec<String>,
}

/// Body of the first fenced block in a model response.
pub fn extract_script(text: &str) -> Result<ExtractedScript> {
    let scan = fence::scan(text);
    let first = scan
        .blocks
        .first()
        .ok_or_else(|| Error::format("response contains no fenced code block"))?;
    if first.body.trim().is_empty() {
        return Err(Error::format("first fenced code block is empty"));
    }
    let mut warnings = Vec::new();
    if scan.blocks.len() > 1 {
        warnings.push(format!(
            "response has {} fenced blocks; using the first (line {})",
            scan.blocks.len(),
            first.line
        ));
    }
    Ok(ExtractedScript {
        script: first.body.clone(),
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub timeout_s: u64,
    /// Parent directory for per-run scratch directories.
    pub scratch_root: PathBuf,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            timeout_s: DEFAULT_TIMEOUT_S,
            scratch_root: std::env::temp_dir(),
        }
    }
}

/// Relative location of a chart's figure inside a dataset.
pub fn figure_rel_path(chart_id: &str) -> String {
    format!("charts/{chart_id}/{FIGURE_FILE}")
}

/// Execute `script` for `seed` and, on success, move the figure under
/// `dataset_root/charts/<id>/figure.png`. Script failures come back as a record with
/// a failing status; `Err` means the sandbox itself is unusable.
pub fn render_chart(
    seed: &ChartSeed,
    script: &str,
    sandbox: &dyn Sandbox,
    dataset_root: &Path,
    options: &RenderOptions,
) -> Result<ChartRecord> {
    fs::create_dir_all(&options.scratch_root)?;
    let workdir = tempfile::Builder::new()
        .prefix("render-")
        .tempdir_in(&options.scratch_root)?;
    let request = SandboxRequest {
        script: script.to_string(),
        timeout_s: options.timeout_s,
        workdir: workdir.path().to_path_buf(),
    };
    let result = sandbox.execute(&request)?;

    let mut record = ChartRecord {
        seed: seed.clone(),
        script: script.to_string(),
        figure_path: String::new(),
        render_status: result.status,
        diagnostic: result.stderr_tail.clone(),
    };
    if result.status != RenderStatus::Ok {
        return Ok(record);
    }

    let produced = result
        .figure_file
        .clone()
        .unwrap_or_else(|| workdir.path().join(FIGURE_FILE));
    let non_empty = fs::metadata(&produced).map(|m| m.len() > 0).unwrap_or(false);
    if !non_empty || !has_png_magic(&produced) {
        record.render_status = RenderStatus::NoFigure;
        record.diagnostic = format!("{FIGURE_FILE} missing, empty or not a PNG");
        return Ok(record);
    }

    let rel = figure_rel_path(&seed.id);
    let dest = dataset_root.join(&rel);
    fs::create_dir_all(dest.parent().expect("figure path has a parent"))?;
    if fs::rename(&produced, &dest).is_err() {
        fs::copy(&produced, &dest)?;
    }
    record.figure_path = rel;
    record.seed.figure_description = seed.figure_intent.clone();
    Ok(record)
}

/// Why a Stage 2 attempt produced no usable chart.
pub fn failure_reason(status: RenderStatus) -> &'static str {
    match status {
        RenderStatus::Ok => "ok",
        RenderStatus::ExecError => "render_exec_error",
        RenderStatus::Timeout => "render_timeout",
        RenderStatus::NoFigure => "render_no_figure",
    }
}

pub const REASON_BACKEND: &str = "stage2_backend";
pub const REASON_FORMAT: &str = "stage2_format";

/// Everything a Stage 2 attempt needs besides the seed and the pool snapshot.
pub struct Stage2Context<'a> {
    pub gateway: &'a Gateway,
    pub sandbox: &'a dyn Sandbox,
    pub docs: &'a DocCatalog,
    pub k: usize,
    pub model_id: String,
    pub render: RenderOptions,
}

impl<'a> Stage2Context<'a> {
    pub fn new(gateway: &'a Gateway, sandbox: &'a dyn Sandbox, docs: &'a DocCatalog) -> Self {
        Stage2Context {
            gateway,
            sandbox,
            docs,
            k: DEFAULT_ICL,
            model_id: DEFAULT_MODEL.to_string(),
            render: RenderOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum FigureOutcome {
    Rendered(ChartRecord),
    /// Dropped by the format or execution filter. `record` is present when the script
    /// reached the sandbox.
    Filtered {
        reason: &'static str,
        detail: String,
        record: Option<ChartRecord>,
    },
}

impl FigureOutcome {
    pub fn is_rendered(&self) -> bool {
        matches!(self, FigureOutcome::Rendered(_))
    }

    pub fn reason(&self) -> &'static str {
        match self {
            FigureOutcome::Rendered(_) => "ok",
            FigureOutcome::Filtered { reason, .. } => reason,
        }
    }
}

/// One complete Stage 2 attempt: prompt, completion, extraction, render.
pub fn generate_figure<R: Rng + ?Sized>(
    seed: &ChartSeed,
    pool: &ExemplarPool,
    variant: Stage2PromptVariant,
    ctx: &Stage2Context<'_>,
    dataset_root: &Path,
    rng: &mut R,
) -> Result<FigureOutcome> {
    let prompt = build_stage2_prompt(seed, ctx.docs, pool, ctx.k, variant, rng);
    let exchange = match ctx.gateway.complete(&prompt.to_request(&ctx.model_id)) {
        Ok(x) => x,
        Err(e @ (Error::Backend { .. } | Error::CacheMiss { .. })) => {
            return Ok(FigureOutcome::Filtered {
                reason: REASON_BACKEND,
                detail: e.to_string(),
                record: None,
            })
        }
        Err(e) => return Err(e),
    };
    let extracted = match extract_script(&exchange.response_text) {
        Ok(x) => x,
        Err(e) => {
            return Ok(FigureOutcome::Filtered {
                reason: REASON_FORMAT,
                detail: e.to_string(),
                record: None,
            })
        }
    };
    for w in &extracted.warnings {
        log::warn!("chart {}: {w}", seed.id);
    }
    let record = render_chart(seed, &extracted.script, ctx.sandbox, dataset_root, &ctx.render)?;
    if record.is_ok() {
        Ok(FigureOutcome::Rendered(record))
    } else {
        Ok(FigureOutcome::Filtered {
            reason: failure_reason(record.render_status),
            detail: record.diagnostic.clone(),
            record: Some(record),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Stage2PromptVariant,
    pub label: String,
    pub attempts: usize,
    pub successes: usize,
    /// Percentage of attempts that rendered.
    pub success_rate: f64,
    pub failures: FilterStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Stage2PromptVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Prompt".len());
        let mut out = format!("{:<width$}  {:>8}  {:>9}  {:>12}\n", "Prompt", "attempts", "successes", "success rate");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>9}  {:>11.1}%\n",
                r.label, r.attempts, r.successes, r.success_rate
            ));
        }
        let reference: Vec<String> = REFERENCE_RATES
            .iter()
            .map(|(v, rate)| format!("{} {rate:.0}%", v.label()))
            .collect();
        out.push_str(&format!(
            "\nReference rates of the original GPT-4 pipeline (context only): {}\n",
            reference.join(", ")
        ));
        out
    }
}

/// Run every seed under every variant against a fixed pool snapshot and report the
/// render success rate per variant. Backend and format failures count as failures.
pub fn run_ablation<R: Rng + ?Sized>(
    seeds: &[ChartSeed],
    variants: &[Stage2PromptVariant],
    pool: &ExemplarPool,
    ctx: &Stage2Context<'_>,
    rng: &mut R,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    if variants.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant"));
    }
    let scratch = tempfile::Builder::new().prefix("ablation-").tempdir_in(&ctx.render.scratch_root)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let root = scratch.path().join(variant.tag());
        let mut successes = 0;
        let mut failures = FilterStats::default();
        for seed in seeds {
            match generate_figure(seed, pool, variant, ctx, &root, rng)? {
                FigureOutcome::Rendered(_) => successes += 1,
                FigureOutcome::Filtered { reason, .. } => failures.record(reason),
            }
        }
        rows.push(AblationRow {
            variant,
            label: variant.label().to_string(),
            attempts: seeds.len(),
            successes,
            success_rate: 100.0 * successes as f64 / seeds.len() as f64,
            failures,
        });
    }
    Ok(AblationReport { rows })
}
