//! File-level evaluation: load prediction and gold files, score them with the
//! [`eval`](crate::eval) metrics and report one [`EvalScore`] per metric.
//!
//! Formats:
//! * QA: JSONL, one `{"id", "predicted"}` object per line for predictions and one
//!   `{"id", "gold"}` per line for gold answers (`answer` is accepted for either).
//! * Chart extraction: two directories of `<id>.csv` tables (fenced CSV is accepted
//!   for predictions). A gold table without a prediction scores zero.
//! * Rubric: a directory of `*.json` / `*.jsonl` files, each object a
//!   [`RubricConditions`] plus an optional `id`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalScore, QAPrediction, RubricConditions, RubricResult};
use crate::llm::Gateway;
use crate::model::{TableData, TaskKind};

#[derive(Deserialize)]
struct AnswerLine {
    id: String,
    #[serde(alias = "predicted", alias = "gold")]
    answer: String,
}

fn read_answers(path: &Path) -> Result<Vec<AnswerLine>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Join predictions to gold answers by id. Gold ids with no prediction get an empty
/// prediction; predictions with no gold answer are an error.
pub fn load_qa(pred_path: &Path, gold_path: &Path) -> Result<Vec<QAPrediction>> {
    let mut preds: BTreeMap<String, String> = BTreeMap::new();
    for line in read_answers(pred_path)? {
        if preds.insert(line.id.clone(), line.answer).is_some() {
            return Err(Error::format(format!("duplicate prediction id {}", line.id)));
        }
    }
    let gold = read_answers(gold_path)?;
    if let Some(extra) = preds.keys().find(|id| !gold.iter().any(|g| &g.id == *id)) {
        return Err(Error::invalid(format!("prediction {extra} has no gold answer")));
    }
    Ok(gold
        .into_iter()
        .map(|g| QAPrediction {
            predicted: preds.remove(&g.id).unwrap_or_default(),
            id: g.id,
            gold: g.answer,
        })
        .collect())
}

pub fn score_qa(preds: &[QAPrediction], tol: f64) -> Result<EvalScore> {
    Ok(EvalScore {
        task: TaskKind::Qa,
        metric: "relaxed_accuracy".into(),
        count: preds.len(),
        value: eval::relaxed_accuracy(preds, tol)?,
    })
}

/// Mean BLEU-4 (as a percentage) of predictions against gold texts, joined by id.
pub fn score_bleu(preds: &[QAPrediction]) -> Result<EvalScore> {
    if preds.is_empty() {
        return Err(Error::invalid("BLEU over an empty prediction list"));
    }
    let total: f64 = preds.iter().map(|p| eval::bleu4(&p.predicted, &[p.gold.as_str()])).sum();
    Ok(EvalScore {
        task: TaskKind::ChartToText,
        metric: "bleu4".into(),
        count: preds.len(),
        value: 100.0 * total / preds.len() as f64,
    })
}

fn csv_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::invalid(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Per-table and mean extraction scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub per_table: BTreeMap<String, eval::Prf>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ExtractionReport {
    pub fn scores(&self) -> Vec<EvalScore> {
        let n = self.per_table.len();
        [("precision", self.precision), ("recall", self.recall), ("f1", self.f1)]
            .into_iter()
            .map(|(metric, v)| EvalScore {
                task: TaskKind::ChartExtraction,
                metric: metric.into(),
                count: n,
                value: 100.0 * v,
            })
            .collect()
    }
}

pub fn score_extraction_dirs(pred_dir: &Path, gold_dir: &Path, tau: f64) -> Result<ExtractionReport> {
    let gold = csv_files(gold_dir)?;
    if gold.is_empty() {
        return Err(Error::invalid(format!("no gold tables in {}", gold_dir.display())));
    }
    let preds = csv_files(pred_dir)?;
    let mut per_table = BTreeMap::new();
    for (id, gold_path) in &gold {
        let gold_table = TableData::from_csv(&fs::read_to_string(gold_path)?)?;
        let prf = match preds.get(id) {
            None => eval::Prf::from_pr(0.0, 0.0),
            Some(p) => match crate::stage3::parse_extraction_answer(&fs::read_to_string(p)?) {
                Ok(t) => eval::table_similarity_with(&eval::table_to_triples(&t), &eval::table_to_triples(&gold_table), tau),
                Err(_) => eval::Prf::from_pr(0.0, 0.0),
            },
        };
        per_table.insert(id.clone(), prf);
    }
    let n = per_table.len() as f64;
    let mean = |f: fn(&eval::Prf) -> f64| per_table.values().map(f).sum::<f64>() / n;
    Ok(ExtractionReport {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
        per_table,
    })
}

#[derive(Clone, Debug, Default, Deserialize)]
struct RubricRun {
    #[serde(default)]
    id: Option<String>,
    #[serde(flatten)]
    conditions: RubricConditions,
}

/// Load rubric runs from a directory (or a single file), ordered by file name and line.
pub fn load_rubric_runs(path: &Path) -> Result<Vec<(String, RubricConditions)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.retain(|p| p.extension().is_some_and(|e| e == "json" || e == "jsonl"));
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut runs = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        let objects: Vec<RubricRun> = if file.extension().is_some_and(|e| e == "jsonl") {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("{}: {e}", file.display())))?
        } else {
            vec![serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", file.display())))?]
        };
        let many = objects.len() > 1;
        for (i, run) in objects.into_iter().enumerate() {
            let id = run.id.unwrap_or_else(|| if many { format!("{stem}-{i}") } else { stem.clone() });
            runs.push((id, run.conditions));
        }
    }
    if runs.is_empty() {
        return Err(Error::invalid(format!("no rubric runs under {}", path.display())));
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubricReport {
    pub task: TaskKind,
    pub results: Vec<(String, RubricResult)>,
    /// Mean normalized score over all runs.
    pub mean: f64,
}

impl RubricReport {
    pub fn score(&self) -> EvalScore {
        EvalScore {
            task: self.task,
            metric: "rubric".into(),
            count: self.results.len(),
            value: self.mean,
        }
    }
}

/// Score every run with the evaluator model, `workers` requests at a time.
pub fn score_rubric_runs(
    gateway: &Gateway,
    task: TaskKind,
    runs: &[(String, RubricConditions)],
    model_id: &str,
    workers: usize,
) -> Result<RubricReport> {
    if eval::rubric_for(task).is_none() {
        return Err(Error::invalid(format!("task {task} has no rubric")));
    }
    if runs.is_empty() {
        return Err(Error::invalid("no rubric runs"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let results: Vec<(String, RubricResult)> = pool.install(|| {
        runs.par_iter()
            .map(|(id, cond)| Ok((id.clone(), eval::evaluate_rubric(gateway, task, cond, model_id)?)))
            .collect::<Result<_>>()
    })?;
    let mean = results.iter().map(|(_, r)| r.normalized).sum::<f64>() / results.len() as f64;
    Ok(RubricReport { task, results, mean })
}
