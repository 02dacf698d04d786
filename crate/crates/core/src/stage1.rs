//! Stage 1: controlled generation of tabular chart data and its descriptions.
//!
//! A [`GenerationSpec`] fixes a theme, per-column trends, the table size and the chart
//! type. The model answers with three fenced sections (`csv`, `data-description`,
//! `figure-intent`); anything else is rejected and retried.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence;
use crate::llm::{ChatRequest, Gateway, DEFAULT_MODEL, GENERATION_TEMPERATURE};
use crate::model::{check_trend, validate_table, ChartSeed, ChartType, GenerationSpec, TableData, TrendSpec};

pub const SYSTEM_PROMPT: &str = "You are a data analyst who writes realistic, diverse and precise tabular data for charts. \
You follow the requested output format exactly.";

pub const THEMES_SYSTEM_PROMPT: &str = "You brainstorm short, concrete themes for data charts.";

pub const SECTION_CSV: &str = "csv";
pub const SECTION_DATA: &str = "data-description";
pub const SECTION_FIGURE: &str = "figure-intent";

pub const MAX_THEME_WORDS: usize = 8;

const BUILTIN_THEMES: &str = include_str!("../assets/themes.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeSource {
    Builtin,
    Bootstrapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThemePool {
    pub themes: Vec<String>,
    pub source: ThemeSource,
}

impl ThemePool {
    /// The 20 shipped fallback themes.
    pub fn builtin() -> Self {
        ThemePool {
            themes: parse_theme_lines(BUILTIN_THEMES),
            source: ThemeSource::Builtin,
        }
    }

    /// Load a plain-text theme list, one phrase per line.
    pub fn from_text(text: &str) -> Result<Self> {
        let themes = parse_theme_lines(text);
        if themes.is_empty() {
            return Err(Error::config("theme list is empty"));
        }
        Ok(ThemePool {
            themes,
            source: ThemeSource::Builtin,
        })
    }

    pub fn len(&self) -> usize {
        self.themes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.themes.is_empty()
    }
}

fn parse_theme_lines(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(clean_theme)
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Strip list markers and quotes from one response line and lowercase it. Lines that
/// are empty or longer than [`MAX_THEME_WORDS`] words yield `None`.
fn clean_theme(line: &str) -> Option<String> {
    let mut t = line.trim();
    t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            t = r.trim_start();
        }
    }
    let t = t.trim_matches(['"', '\'', '`']).trim().trim_end_matches(['.', ',', ';']);
    let words = t.split_whitespace().count();
    if words == 0 || words > MAX_THEME_WORDS {
        return None;
    }
    Some(t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
}

/// Ask the backend for `count` theme phrases and merge them with the builtin list,
/// deduplicating case-insensitively.
pub fn bootstrap_themes(count: usize, gateway: &Gateway) -> Result<ThemePool> {
    if count == 0 {
        return Err(Error::invalid("theme count must be at least 1"));
    }
    let user = format!(
        "List {count} distinct themes for data charts (topics such as industries, science, daily life, economics). \
Write one theme per line, each at most {MAX_THEME_WORDS} words, with no numbering and no extra text."
    );
    let request = ChatRequest::new(THEMES_SYSTEM_PROMPT, user).with_max_tokens((count as u32 * 16).max(256));
    let exchange = gateway.complete(&request)?;
    let mut fresh = parse_theme_lines(&exchange.response_text);
    if fresh.is_empty() {
        return Err(Error::format("theme response contains no usable phrases"));
    }
    fresh.truncate(count);

    let mut seen: BTreeSet<String> = fresh.iter().cloned().collect();
    for builtin in ThemePool::builtin().themes {
        if seen.insert(builtin.clone()) {
            fresh.push(builtin);
        }
    }
    Ok(ThemePool {
        themes: fresh,
        source: ThemeSource::Bootstrapped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Relative chart-type weights; types absent or at zero are never sampled.
    pub chart_weights: BTreeMap<ChartType, f64>,
    /// Inclusive row-count range.
    pub rows: (usize, usize),
    /// Inclusive value-column range, for chart types without a fixed column count.
    pub value_cols: (usize, usize),
    pub trends: Vec<TrendSpec>,
    #[serde(default)]
    pub reference_tables: Vec<TableData>,
    /// Chance of attaching a reference table when any are configured.
    #[serde(default)]
    pub reference_probability: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            chart_weights: ChartType::ALL.into_iter().map(|t| (t, 1.0)).collect(),
            rows: (3, 12),
            value_cols: (1, 4),
            trends: TrendSpec::builtin(),
            reference_tables: Vec::new(),
            reference_probability: 0.0,
        }
    }
}

impl SamplingConfig {
    pub fn enabled_chart_types(&self) -> Vec<ChartType> {
        self.chart_weights
            .iter()
            .filter(|(_, &w)| w > 0.0)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.chart_weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("chart-type weights must be finite and non-negative"));
        }
        if self.enabled_chart_types().is_empty() {
            return Err(Error::config("all chart types are disabled"));
        }
        if self.rows.0 < 1 || self.rows.0 > self.rows.1 {
            return Err(Error::config(format!("invalid row range {:?}", self.rows)));
        }
        if self.value_cols.0 < 1 || self.value_cols.0 > self.value_cols.1 {
            return Err(Error::config(format!("invalid value-column range {:?}", self.value_cols)));
        }
        if self.trends.is_empty() {
            return Err(Error::config("trend vocabulary is empty"));
        }
        if !(0.0..=1.0).contains(&self.reference_probability) {
            return Err(Error::config("reference_probability outside [0, 1]"));
        }
        self.trends.iter().try_for_each(TrendSpec::validate)
    }
}

/// Draw one generation spec. Deterministic for a given rng state.
pub fn sample_spec<R: Rng + ?Sized>(config: &SamplingConfig, pool: &ThemePool, rng: &mut R) -> Result<GenerationSpec> {
    if pool.is_empty() {
        return Err(Error::config("theme pool is empty"));
    }
    config.validate()?;

    let theme = pool.themes[rng.gen_range(0..pool.len())].clone();
    let types: Vec<(ChartType, f64)> = config
        .chart_weights
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(&t, &w)| (t, w))
        .collect();
    let dist = WeightedIndex::new(types.iter().map(|(_, w)| *w))
        .map_err(|e| Error::config(format!("chart-type weights: {e}")))?;
    let chart_type = types[dist.sample(rng)].0;

    let n_rows = rng.gen_range(config.rows.0..=config.rows.1);
    let n_value = chart_type
        .fixed_value_columns()
        .unwrap_or_else(|| rng.gen_range(config.value_cols.0..=config.value_cols.1));
    let trends = (0..n_value)
        .map(|_| config.trends.choose(rng).expect("non-empty trends").clone())
        .collect();
    let reference_table = if !config.reference_tables.is_empty() && rng.gen_bool(config.reference_probability) {
        config.reference_tables.choose(rng).cloned()
    } else {
        None
    };

    Ok(GenerationSpec {
        theme,
        trends,
        n_rows,
        n_cols: n_value + 1,
        chart_type,
        reference_table,
        rng_seed: rng.gen(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Prompt {
    pub system_text: String,
    pub user_text: String,
}

impl Stage1Prompt {
    pub fn to_request(&self, model_id: &str) -> ChatRequest {
        ChatRequest::new(&self.system_text, &self.user_text)
            .with_model(model_id)
            .with_temperature(GENERATION_TEMPERATURE)
    }
}

pub fn build_stage1_prompt(spec: &GenerationSpec) -> Stage1Prompt {
    let n_value = spec.n_value_cols();
    let mut user = String::new();
    user.push_str(&format!("Generate the raw data for one {} chart.\n\n", spec.chart_type));
    user.push_str(&format!("Theme: {}\n", spec.theme));
    user.push_str(&format!("Chart type: {}\n", spec.chart_type));
    user.push_str(&format!("Rows: {}\n", spec.n_rows));
    user.push_str(&format!(
        "Columns: {} (the first column holds the row labels, followed by {} value column(s))\n",
        spec.n_cols, n_value
    ));
    if !spec.trends.is_empty() {
        user.push_str("Trends (value columns from left to right):\n");
        for (i, trend) in spec.trends.iter().enumerate() {
            user.push_str(&format!("- column {}: {}\n", i + 1, trend.label));
        }
    }
    user.push_str(&format!("Constraint: {}\n", spec.chart_type.constraint_text()));

    if let Some(reference) = &spec.reference_table {
        user.push_str(
            "\nHere is reference data. Generate data of a similar shape but with different content:\n",
        );
        user.push_str(&fence::wrap("reference", &reference.to_csv()));
        user.push('\n');
    }

    user.push_str(&format!(
        "\nAnswer with exactly three fenced sections, in this order, and fence nothing else:\n\
1. ```{SECTION_CSV}: the table as comma-separated values, a header row followed by exactly {rows} data rows of {cols} cells. \
Cells hold plain numbers or short labels, with no units or thousands separators.\n\
2. ```{SECTION_DATA}: one paragraph describing what the data measures and its notable characteristics.\n\
3. ```{SECTION_FIGURE}: one paragraph describing how the chart should look (title, axes, colors, legend, annotations).\n",
        rows = spec.n_rows,
        cols = spec.n_cols,
    ));

    Stage1Prompt {
        system_text: SYSTEM_PROMPT.to_string(),
        user_text: user,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Output {
    pub table: TableData,
    pub data_description: String,
    pub figure_description: String,
}

/// Render a table and descriptions in the Stage 1 output contract.
pub fn render_stage1_output(table: &TableData, data_description: &str, figure_description: &str) -> String {
    format!(
        "{}\n\n{}\n\n{}\n",
        fence::wrap(SECTION_CSV, &table.to_csv()),
        fence::wrap(SECTION_DATA, data_description),
        fence::wrap(SECTION_FIGURE, figure_description)
    )
}

pub fn parse_stage1_output(text: &str) -> Result<Stage1Output> {
    let scan = fence::scan(text);
    if let Some(line) = scan.unterminated {
        return Err(Error::format(format!("unterminated fenced section opened on line {line}")));
    }
    let expected = [SECTION_CSV, SECTION_DATA, SECTION_FIGURE];
    let labels: Vec<String> = scan.blocks.iter().map(|b| fence::normalize_label(&b.label)).collect();
    if labels != expected {
        let missing: Vec<&str> = expected.iter().copied().filter(|e| !labels.iter().any(|l| l == e)).collect();
        let detail = if !missing.is_empty() {
            format!("missing section(s) {}", missing.join(", "))
        } else {
            format!("expected sections {expected:?} in order, found {labels:?}")
        };
        return Err(Error::format(detail));
    }
    let table = TableData::from_csv(&scan.blocks[0].body)?;
    let data_description = scan.blocks[1].body.trim().to_string();
    let figure_description = scan.blocks[2].body.trim().to_string();
    if data_description.is_empty() || figure_description.is_empty() {
        return Err(Error::format("description sections must not be empty"));
    }
    Ok(Stage1Output {
        table,
        data_description,
        figure_description,
    })
}

#[derive(Clone, Debug)]
pub struct Stage1Options {
    pub max_attempts: usize,
    /// Reject tables whose value columns do not follow the requested trends.
    pub enforce_trends: bool,
    pub model_id: String,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            max_attempts: 3,
            enforce_trends: false,
            model_id: DEFAULT_MODEL.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: ChartSeed,
    pub attempts_used: usize,
    /// Trend mismatches observed on the accepted table (only warnings unless enforced).
    pub trend_warnings: Vec<String>,
}

fn trend_mismatches(table: &TableData, spec: &GenerationSpec) -> Vec<String> {
    let mut out = Vec::new();
    if table.n_rows() < 2 {
        return out;
    }
    for (i, trend) in spec.trends.iter().enumerate().take(table.n_value_cols()) {
        if let Some(series) = table.numeric_column(i) {
            if let Ok(false) = check_trend(&series, trend) {
                out.push(format!("column {:?} does not follow {:?}", table.value_headers()[i], trend.label));
            }
        }
    }
    out
}

/// Run the complete-parse-validate loop until a table passes or attempts run out.
pub fn generate_seed(id: &str, spec: &GenerationSpec, gateway: &Gateway, options: &Stage1Options) -> Result<SeedOutcome> {
    if options.max_attempts == 0 {
        return Err(Error::invalid("max_attempts must be at least 1"));
    }
    spec.validate()?;
    let prompt = build_stage1_prompt(spec);
    let mut reasons: Vec<String> = Vec::new();

    for attempt in 1..=options.max_attempts {
        let mut request = prompt.to_request(&options.model_id);
        if let Some(last) = reasons.last() {
            request.user_text.push_str(&format!(
                "\nAttempt {attempt}: the previous answer was rejected ({last}). Follow the format and constraint exactly.\n"
            ));
        }
        let exchange = match gateway.complete(&request) {
            Ok(x) => x,
            Err(e @ (Error::Backend { .. } | Error::CacheMiss { .. })) => {
                reasons.push(e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        let parsed = match parse_stage1_output(&exchange.response_text) {
            Ok(p) => p,
            Err(e) => {
                reasons.push(e.to_string());
                continue;
            }
        };
        let report = validate_table(&parsed.table, spec.chart_type);
        if !report.is_ok() {
            reasons.push(report.violations.join(", "));
            continue;
        }
        let trend_warnings = trend_mismatches(&parsed.table, spec);
        if options.enforce_trends && !trend_warnings.is_empty() {
            reasons.push(trend_warnings.join(", "));
            continue;
        }
        for w in &trend_warnings {
            log::debug!("seed {id}: {w}");
        }
        return Ok(SeedOutcome {
            seed: ChartSeed {
                id: id.to_string(),
                spec: spec.clone(),
                table: parsed.table,
                data_description: parsed.data_description,
                figure_intent: parsed.figure_description,
                figure_description: String::new(),
            },
            attempts_used: attempt,
            trend_warnings,
        });
    }
    Err(Error::GenerationFailed {
        attempts: options.max_attempts,
        reasons,
    })
}

/// Filter-counter name for a Stage 1 failure, classified by its last rejection.
pub fn failure_reason(error: &Error) -> &'static str {
    let last = match error {
        Error::GenerationFailed { reasons, .. } => reasons.last().map(|r| r.to_lowercase()).unwrap_or_default(),
        Error::Backend { .. } | Error::CacheMiss { .. } => return "stage1_backend",
        _ => return "stage1_error",
    };
    if last.contains("backend error") || last.contains("cache miss") {
        "stage1_backend"
    } else if last.contains("csv") {
        "stage1_malformed_csv"
    } else if last.contains("missing section") || last.contains("expected sections") || last.contains("unterminated") {
        "stage1_missing_section"
    } else if last.contains("does not follow") {
        "stage1_trend_mismatch"
    } else if last.contains("pie sum") || last.contains("row ") || last.contains("needs") {
        "stage1_constraint_violation"
    } else {
        "stage1_format"
    }
}
