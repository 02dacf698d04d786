//! Metrics for the seven chart tasks.
//!
//! * QA: [`relaxed_match`] / [`relaxed_accuracy`].
//! * Chart extraction: [`table_similarity`] over [`TableTriples`], optimal one-to-one
//!   matching of (row, column, value) entries.
//! * Chart-to-text: [`bleu4`].
//! * Generative tasks: an evaluator model scores a prediction against a per-task rubric
//!   ([`build_rubric_prompt`], [`parse_rubric_scores`]), normalized to 0..100.
//! * Code tasks also report [`success_rate`] of the predicted scripts.
//!
//! Everything except [`evaluate_rubric`] is pure.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence;
use crate::llm::{ChatRequest, Gateway, EVALUATION_TEMPERATURE};
use crate::model::{RenderStatus, TableData, TaskKind};

pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 0.5;

// Absorbs float rounding in tol·|g| so that exact boundary cases match.
const BOUNDARY_EPS: f64 = 1e-9;

fn thousands_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[-+]?\d{1,3}(,\d{3})+(\.\d+)?$").unwrap())
}

/// Trim, lowercase, drop a trailing percent sign and thousands separators.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.trim().to_lowercase();
    if let Some(stripped) = s.strip_suffix('%') {
        s = stripped.trim_end().to_string();
    }
    if thousands_re().is_match(&s) {
        s = s.replace(',', "");
    }
    s
}

fn parse_number(normalized: &str) -> Option<f64> {
    normalized.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Numeric answers match within `tol` relative to the gold value; anything else needs
/// normalized string equality.
pub fn relaxed_match(predicted: &str, gold: &str, tol: f64) -> bool {
    let p = normalize_answer(predicted);
    let g = normalize_answer(gold);
    match (parse_number(&p), parse_number(&g)) {
        (Some(pv), Some(gv)) => {
            if gv == 0.0 {
                pv == 0.0
            } else {
                (pv - gv).abs() <= tol * gv.abs() * (1.0 + BOUNDARY_EPS)
            }
        }
        _ => p == g,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPrediction {
    pub id: String,
    pub predicted: String,
    pub gold: String,
}

/// Percentage of predictions that [`relaxed_match`] their gold answer.
pub fn relaxed_accuracy(preds: &[QAPrediction], tol: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("relaxed accuracy over an empty prediction list"));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::invalid(format!("tolerance must be non-negative, got {tol}")));
    }
    if let Some(bad) = preds.iter().find(|p| p.gold.trim().is_empty()) {
        return Err(Error::invalid(format!("prediction {} has an empty gold answer", bad.id)));
    }
    let hits = preds.iter().filter(|p| relaxed_match(&p.predicted, &p.gold, tol)).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TripleValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for TripleValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TripleValue::Number(v) => write!(f, "{v}"),
            TripleValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub row_key: String,
    pub col_key: String,
    pub value: TripleValue,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableTriples {
    pub entries: Vec<Triple>,
}

impl TableTriples {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One entry per (row, value column), row-major.
pub fn table_to_triples(table: &TableData) -> TableTriples {
    let headers = table.column_headers();
    let mut entries = Vec::with_capacity(table.n_rows() * table.n_value_cols());
    for (r, key) in table.row_keys().iter().enumerate() {
        for (c, cell) in table.values()[r].iter().enumerate() {
            let value = match cell.as_f64() {
                Some(v) => TripleValue::Number(v),
                None => TripleValue::Text(cell.text().to_string()),
            };
            entries.push(Triple {
                row_key: key.clone(),
                col_key: headers[c + 1].clone(),
                value,
            });
        }
    }
    TableTriples { entries }
}

/// Normalized edit distance, saturated to 1 once it reaches `tau`.
pub fn normalized_levenshtein_tau(a: &str, b: &str, tau: f64) -> f64 {
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        return 0.0;
    }
    let nl = strsim::levenshtein(a, b) as f64 / len as f64;
    if nl >= tau {
        1.0
    } else {
        nl
    }
}

fn value_similarity(p: &TripleValue, t: &TripleValue, tau: f64) -> f64 {
    match (p, t) {
        (TripleValue::Number(vp), TripleValue::Number(vt)) => {
            if *vt == 0.0 {
                if *vp == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 - ((vp - vt).abs() / vt.abs()).min(1.0)
            }
        }
        _ => 1.0 - normalized_levenshtein_tau(&p.to_string(), &t.to_string(), tau),
    }
}

/// Similarity of two entries: key similarity times value similarity, in [0, 1].
pub fn entry_similarity(p: &Triple, t: &Triple, tau: f64) -> f64 {
    let pk = format!("{}{}", p.row_key, p.col_key);
    let tk = format!("{}{}", t.row_key, t.col_key);
    let key_sim = 1.0 - normalized_levenshtein_tau(&pk, &tk, tau);
    key_sim * value_similarity(&p.value, &t.value, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Precision, recall and F1 of `pred` against `gold` under the optimal one-to-one
/// matching of entries.
pub fn table_similarity(pred: &TableTriples, gold: &TableTriples) -> (f64, f64, f64) {
    let prf = table_similarity_with(pred, gold, DEFAULT_TAU);
    (prf.precision, prf.recall, prf.f1)
}

pub fn table_similarity_with(pred: &TableTriples, gold: &TableTriples, tau: f64) -> Prf {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return Prf::from_pr(1.0, 1.0),
        (true, false) | (false, true) => return Prf::from_pr(0.0, 0.0),
        _ => {}
    }
    let sim: Vec<Vec<f64>> = pred
        .entries
        .iter()
        .map(|p| gold.entries.iter().map(|t| entry_similarity(p, t, tau)).collect())
        .collect();
    let total = max_assignment(&sim);
    let precision = (total / pred.len() as f64).clamp(0.0, 1.0);
    let recall = (total / gold.len() as f64).clamp(0.0, 1.0);
    Prf::from_pr(precision, recall)
}

/// Maximum total weight of a one-to-one assignment on a rectangular matrix.
pub fn max_assignment(weights: &[Vec<f64>]) -> f64 {
    let rows = weights.len();
    if rows == 0 {
        return 0.0;
    }
    let cols = weights[0].len();
    if cols == 0 {
        return 0.0;
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| -> f64 {
        if transpose {
            -weights[j][i]
        } else {
            -weights[i][j]
        }
    };

    // Shortest augmenting path with potentials; rows 1..=n, columns 1..=m, n <= m.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| -cost(p[j] - 1, j - 1))
        .sum()
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 on whitespace tokens: clipped n-gram precisions for n = 1..4,
/// geometric mean, brevity penalty against the closest reference length. No smoothing.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<HashMap<&[&str], usize>> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = cand_counts
            .iter()
            .map(|(gram, &c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0)
}

/// Criteria and integer scale of a rubric-scored task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rubric {
    pub task: TaskKind,
    pub criteria: &'static [&'static str],
    pub scale: (i64, i64),
}

pub fn rubric_for(task: TaskKind) -> Option<Rubric> {
    let (criteria, scale): (&'static [&'static str], (i64, i64)) = match task {
        TaskKind::ChartToChart => (&["data", "axes", "colors", "chart types", "titles"], (0, 5)),
        TaskKind::TextToChart => (&["visual similarity", "completeness", "accuracy", "aesthetics"], (1, 5)),
        TaskKind::ChartEditing => (
            &["data accuracy", "completeness", "aesthetics", "instruction following"],
            (0, 5),
        ),
        TaskKind::DetailedDescription => (
            &["data characteristics", "visual attributes", "accuracy", "completeness"],
            (0, 5),
        ),
        TaskKind::ChartToText => (&["accuracy", "completeness", "relevance", "fluency"], (0, 5)),
        TaskKind::Qa | TaskKind::ChartExtraction => return None,
    };
    Some(Rubric { task, criteria, scale })
}

fn require_rubric(task: TaskKind) -> Result<Rubric> {
    rubric_for(task).ok_or_else(|| Error::invalid(format!("{task} is not scored with a rubric")))
}

/// Inputs handed to the evaluator; which ones are required depends on the task.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RubricConditions {
    pub gold_script: Option<String>,
    pub predicted_script: Option<String>,
    pub raw_table: Option<String>,
    pub instruction: Option<String>,
    pub reference_script: Option<String>,
    pub original_script: Option<String>,
    pub edit_instruction: Option<String>,
    pub gold_description: Option<String>,
    pub predicted_description: Option<String>,
}

impl RubricConditions {
    /// (field name, fence label, heading, value) in prompt order for `task`.
    fn sections(&self, task: TaskKind) -> Vec<(&'static str, &'static str, &'static str, &Option<String>)> {
        match task {
            TaskKind::ChartToChart => vec![
                ("gold_script", "python", "Reference script", &self.gold_script),
                ("predicted_script", "python", "Predicted script", &self.predicted_script),
            ],
            TaskKind::TextToChart => vec![
                ("raw_table", "csv", "Raw data", &self.raw_table),
                ("instruction", "text", "Instruction", &self.instruction),
                ("reference_script", "python", "Reference script", &self.reference_script),
                ("predicted_script", "python", "Predicted script", &self.predicted_script),
            ],
            TaskKind::ChartEditing => vec![
                ("original_script", "python", "Original script", &self.original_script),
                ("edit_instruction", "text", "Edit instruction", &self.edit_instruction),
                ("predicted_script", "python", "Predicted edited script", &self.predicted_script),
            ],
            _ => vec![
                ("gold_description", "text", "Reference description", &self.gold_description),
                ("raw_table", "csv", "Raw data", &self.raw_table),
                ("predicted_description", "text", "Predicted description", &self.predicted_description),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricPrompt {
    pub task: TaskKind,
    pub system_text: String,
    pub user_text: String,
}

impl RubricPrompt {
    pub fn to_request(&self, model_id: &str) -> ChatRequest {
        ChatRequest::new(&self.system_text, &self.user_text)
            .with_model(model_id)
            .with_temperature(EVALUATION_TEMPERATURE)
            .with_max_tokens(1024)
    }
}

pub const RUBRIC_SYSTEM_PROMPT: &str =
    "You are a strict, consistent grader of chart-related model outputs. Judge only against the reference material provided.";

fn task_subject(task: TaskKind) -> &'static str {
    match task {
        TaskKind::ChartToChart => "a predicted plotting script that should redraw the same chart as the reference script",
        TaskKind::TextToChart => "a predicted plotting script written from an instruction and raw data",
        TaskKind::ChartEditing => "a predicted edit of a plotting script",
        TaskKind::DetailedDescription => "a predicted detailed description of a chart",
        _ => "a predicted summary of a chart",
    }
}

pub fn build_rubric_prompt(task: TaskKind, conditions: &RubricConditions) -> Result<RubricPrompt> {
    let rubric = require_rubric(task)?;
    let sections = conditions.sections(task);
    if let Some((name, ..)) = sections.iter().find(|(_, _, _, v)| v.as_deref().is_none_or(|s| s.trim().is_empty())) {
        return Err(Error::contract(format!("{task} rubric needs condition `{name}`")));
    }

    let (lo, hi) = rubric.scale;
    let mut user = format!("Evaluate {}.\n\n", task_subject(task));
    for (_, label, heading, value) in &sections {
        user.push_str(&format!("{heading}:\n"));
        user.push_str(&fence::wrap(label, value.as_deref().unwrap_or_default()));
        user.push_str("\n\n");
    }
    user.push_str(&format!(
        "Score each of the following {} criteria with an integer from {lo} to {hi}; every criterion is weighted equally:\n",
        rubric.criteria.len()
    ));
    for c in rubric.criteria {
        user.push_str(&format!("- {c} ({lo}-{hi})\n"));
    }
    user.push_str(
        "\nFirst write a short rationale paragraph. Then end your answer with exactly one line per criterion, \
in this form and nothing after them:\n",
    );
    for c in rubric.criteria {
        user.push_str(&format!("CRITERION: {c} SCORE: <int>\n"));
    }
    Ok(RubricPrompt {
        task,
        system_text: RUBRIC_SYSTEM_PROMPT.to_string(),
        user_text: user,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubricResult {
    pub task: TaskKind,
    pub criterion_scores: BTreeMap<String, i64>,
    pub scale: (i64, i64),
    pub normalized: f64,
    pub rationale: String,
}

impl RubricResult {
    /// Build a result from scores, computing the normalized value.
    pub fn new(task: TaskKind, criterion_scores: BTreeMap<String, i64>, rationale: impl Into<String>) -> Result<Self> {
        let rubric = require_rubric(task)?;
        let (lo, hi) = rubric.scale;
        for c in rubric.criteria {
            match criterion_scores.get(*c) {
                None => return Err(Error::invalid(format!("missing score for criterion `{c}`"))),
                Some(&s) if s < lo || s > hi => {
                    return Err(Error::invalid(format!("score {s} for `{c}` outside {lo}..={hi}")))
                }
                _ => {}
            }
        }
        let mean = criterion_scores.values().sum::<i64>() as f64 / criterion_scores.len() as f64;
        Ok(RubricResult {
            task,
            criterion_scores,
            scale: rubric.scale,
            normalized: mean / hi as f64 * 100.0,
            rationale: rationale.into(),
        })
    }

    /// The rationale followed by the contracted score lines, in rubric order.
    pub fn render(&self) -> String {
        let mut out = self.rationale.trim().to_string();
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        let order: Vec<&str> = rubric_for(self.task)
            .map(|r| r.criteria.to_vec())
            .unwrap_or_else(|| self.criterion_scores.keys().map(String::as_str).collect());
        for c in order {
            if let Some(s) = self.criterion_scores.get(c) {
                out.push_str(&format!("CRITERION: {c} SCORE: {s}\n"));
            }
        }
        out
    }
}

fn score_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*[*_`-]*\s*CRITERION:\s*(.+?)\s+SCORE:\s*([-+]?\d+)\s*[*_`]*\s*$").unwrap())
}

fn normalize_criterion(name: &str) -> String {
    name.trim()
        .trim_matches(|c: char| c == '*' || c == '"' || c == '\'' || c == '`')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Extract one score per rubric criterion from evaluator text.
pub fn parse_rubric_scores(evaluator_text: &str, task: TaskKind) -> Result<RubricResult> {
    let rubric = require_rubric(task)?;
    let (lo, hi) = rubric.scale;
    let mut scores: BTreeMap<String, i64> = BTreeMap::new();
    let mut score_lines: BTreeMap<String, String> = BTreeMap::new();
    let mut rationale = Vec::new();
    for line in evaluator_text.lines() {
        let Some(caps) = score_line_re().captures(line) else {
            rationale.push(line);
            continue;
        };
        let name = normalize_criterion(&caps[1]);
        let Some(&criterion) = rubric.criteria.iter().find(|c| **c == name) else {
            continue;
        };
        let score: i64 = caps[2].parse().map_err(|_| Error::ScoreParse {
            message: "score is not an integer".into(),
            lines: vec![line.to_string()],
        })?;
        if score < lo || score > hi {
            return Err(Error::ScoreParse {
                message: format!("score for `{criterion}` outside {lo}..={hi}"),
                lines: vec![line.to_string()],
            });
        }
        if let Some(previous) = score_lines.get(criterion) {
            if scores[criterion] != score {
                return Err(Error::ScoreParse {
                    message: format!("conflicting scores for `{criterion}`"),
                    lines: vec![previous.clone(), line.to_string()],
                });
            }
        }
        scores.insert(criterion.to_string(), score);
        score_lines.insert(criterion.to_string(), line.to_string());
    }
    let missing: Vec<&str> = rubric.criteria.iter().copied().filter(|c| !scores.contains_key(*c)).collect();
    if !missing.is_empty() {
        return Err(Error::ScoreParse {
            message: format!("missing score line for {}", missing.join(", ")),
            lines: score_lines.into_values().collect(),
        });
    }
    RubricResult::new(task, scores, rationale.join("\n").trim())
}

/// Ask the evaluator model to score one prediction.
pub fn evaluate_rubric(
    gateway: &Gateway,
    task: TaskKind,
    conditions: &RubricConditions,
    model_id: &str,
) -> Result<RubricResult> {
    let prompt = build_rubric_prompt(task, conditions)?;
    let exchange = gateway.complete(&prompt.to_request(model_id))?;
    parse_rubric_scores(&exchange.response_text, task)
}

/// Percentage of render attempts that produced a figure.
pub fn success_rate(statuses: &[RenderStatus]) -> Result<f64> {
    if statuses.is_empty() {
        return Err(Error::invalid("success rate over zero render attempts"));
    }
    let ok = statuses.iter().filter(|s| **s == RenderStatus::Ok).count();
    Ok(100.0 * ok as f64 / statuses.len() as f64)
}

/// Two-decimal percentage, e.g. `48.96`.
pub fn format_percentage(value: f64) -> String {
    format!("{value:.2}")
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub task: TaskKind,
    pub metric: String,
    pub count: usize,
    pub value: f64,
}

pub fn render_scores_text(scores: &[EvalScore]) -> String {
    let headers = ["task", "metric", "n", "score"];
    let rows: Vec<[String; 4]> = scores
        .iter()
        .map(|s| [s.task.to_string(), s.metric.clone(), s.count.to_string(), format_percentage(s.value)])
        .collect();
    let mut widths = headers.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: [&str; 4]| {
        format!(
            "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}\n",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        )
    };
    out.push_str(&line(headers));
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}
