//! On-disk dataset layout, manifest, self-audit, statistics and splits.
//!
//! ```text
//! <dir>/manifest.json          written last; its presence marks a complete dataset
//! <dir>/records.jsonl          one InstructionRecord per line
//! <dir>/charts/<id>/figure.png
//! <dir>/charts/<id>/table.csv
//! <dir>/charts/<id>/script
//! <dir>/charts/<id>/chart.json full ChartRecord, used to resume Stage 3
//! <dir>/splits/<name>.jsonl    optional, written by split()
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ChartRecord, FilterStats, InstructionRecord};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const CHARTS_DIR: &str = "charts";
pub const SPLITS_DIR: &str = "splits";
pub const LOCK_FILE: &str = ".chartforge.lock";
pub const TABLE_FILE: &str = "table.csv";
pub const SCRIPT_FILE: &str = "script";
pub const CHART_FILE: &str = "chart.json";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub seeds: usize,
    pub stage1_failures: FilterStats,
    pub render_attempts: usize,
    pub rendered_ok: usize,
    pub render_failures: FilterStats,
    pub stage3_failures: FilterStats,
    pub records_total: usize,
    pub records_per_task: BTreeMap<String, usize>,
    pub charts_per_type: BTreeMap<String, usize>,
}

impl ManifestCounts {
    /// Counts that can be recomputed from the written files alone.
    pub fn from_outputs(charts: &[ChartRecord], records: &[InstructionRecord]) -> Self {
        let mut counts = ManifestCounts {
            rendered_ok: charts.len(),
            render_attempts: charts.len(),
            seeds: charts.len(),
            records_total: records.len(),
            ..Default::default()
        };
        for c in charts {
            *counts.charts_per_type.entry(c.chart_type().to_string()).or_default() += 1;
        }
        for r in records {
            *counts.records_per_task.entry(r.task.to_string()).or_default() += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let per_task: usize = self.records_per_task.values().sum();
        if per_task != self.records_total {
            return Err(Error::Dataset(format!(
                "records per task sum to {per_task}, total is {}",
                self.records_total
            )));
        }
        let per_type: usize = self.charts_per_type.values().sum();
        if per_type != self.rendered_ok {
            return Err(Error::Dataset(format!(
                "charts per type sum to {per_type}, rendered ok is {}",
                self.rendered_ok
            )));
        }
        let attempts = self.rendered_ok + self.render_failures.total();
        if attempts != self.render_attempts {
            return Err(Error::Dataset(format!(
                "ok + failures = {attempts}, attempts is {}",
                self.render_attempts
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub created_at: String,
    pub config_digest: String,
    pub tool_version: String,
    pub base_seed: u64,
    pub counts: ManifestCounts,
    /// SHA-256 over the records and chart files.
    pub content_digest: String,
    /// SHA-256 over every other field except `created_at`.
    pub digest: String,
}

impl DatasetManifest {
    pub fn new(config_digest: impl Into<String>, base_seed: u64, counts: ManifestCounts) -> Self {
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_default();
        DatasetManifest {
            created_at,
            config_digest: config_digest.into(),
            tool_version: TOOL_VERSION.to_string(),
            base_seed,
            counts,
            content_digest: String::new(),
            digest: String::new(),
        }
    }

    pub fn compute_digest(&self) -> String {
        let mut copy = self.clone();
        copy.created_at.clear();
        copy.digest.clear();
        let json = serde_json::to_string(&copy).expect("manifest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().ok_or_else(|| Error::Dataset(format!("{} has no parent", path.display())))?;
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Exclusive writer lock on a dataset directory, released on drop.
#[derive(Debug)]
pub struct DatasetLock {
    path: PathBuf,
}

impl DatasetLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DatasetLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Dataset(format!(
                "{} is locked by another writer (remove {} if that writer is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DatasetLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteOptions {
    /// Replace an existing dataset in the target directory.
    pub force: bool,
}

fn has_dataset_content(dir: &Path) -> bool {
    [MANIFEST_FILE, RECORDS_FILE, CHARTS_DIR].iter().any(|f| dir.join(f).exists())
}

/// Write `<charts_dir>/<id>/{figure.png, table.csv, script, chart.json}` for a rendered
/// chart, copying the figure from `figure_root.join(chart.figure_path)`.
pub fn write_chart(charts_dir: &Path, chart: &ChartRecord, figure_root: &Path) -> Result<()> {
    chart.validate()?;
    if !chart.is_ok() {
        return Err(Error::contract(format!("chart {} did not render", chart.id())));
    }
    let cdir = charts_dir.join(chart.id());
    let src = figure_root.join(&chart.figure_path);
    let figure =
        fs::read(&src).map_err(|e| Error::Dataset(format!("figure for chart {} ({}): {e}", chart.id(), src.display())))?;
    write_atomic(&cdir.join(crate::sandbox::FIGURE_FILE), &figure)?;
    write_atomic(&cdir.join(TABLE_FILE), chart.seed.table.to_csv().as_bytes())?;
    write_atomic(&cdir.join(SCRIPT_FILE), chart.script.as_bytes())?;
    write_atomic(&cdir.join(CHART_FILE), serde_json::to_string_pretty(chart)?.as_bytes())?;
    Ok(())
}

/// Write a complete dataset. Figures are copied from `figure_root.join(chart.figure_path)`.
/// Only successfully rendered charts are written. The manifest's counts for rendered
/// charts and records are overwritten with what is actually written; its digests are
/// filled in. Returns the final manifest.
pub fn write_dataset(
    dir: &Path,
    charts: &[ChartRecord],
    records: &[InstructionRecord],
    mut manifest: DatasetManifest,
    figure_root: &Path,
    options: WriteOptions,
) -> Result<DatasetManifest> {
    if has_dataset_content(dir) && !options.force {
        return Err(Error::Dataset(format!(
            "{} already contains a dataset; pass --force to replace it",
            dir.display()
        )));
    }
    let _lock = DatasetLock::acquire(dir)?;
    // Manifest goes first so an interrupted rewrite reads as incomplete.
    for name in [MANIFEST_FILE, RECORDS_FILE] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    for sub in [CHARTS_DIR, SPLITS_DIR] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(p)?;
        }
    }

    let mut ok_charts: Vec<&ChartRecord> = charts.iter().filter(|c| c.is_ok()).collect();
    ok_charts.sort_by(|a, b| a.id().cmp(b.id()));
    let chart_ids: BTreeSet<&str> = ok_charts.iter().map(|c| c.id()).collect();
    for r in records {
        r.validate()?;
        if !chart_ids.contains(r.chart_id.as_str()) {
            return Err(Error::Dataset(format!("record {} refers to unknown chart {}", r.id, r.chart_id)));
        }
    }

    for chart in &ok_charts {
        write_chart(&dir.join(CHARTS_DIR), chart, figure_root)?;
    }

    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_atomic(&dir.join(RECORDS_FILE), lines.as_bytes())?;

    let owned: Vec<ChartRecord> = ok_charts.iter().map(|c| (*c).clone()).collect();
    let rescanned = ManifestCounts::from_outputs(&owned, records);
    manifest.counts.rendered_ok = rescanned.rendered_ok;
    manifest.counts.records_total = rescanned.records_total;
    manifest.counts.records_per_task = rescanned.records_per_task;
    manifest.counts.charts_per_type = rescanned.charts_per_type;
    manifest.counts.render_attempts = manifest.counts.render_attempts.max(rescanned.rendered_ok + manifest.counts.render_failures.total());
    manifest.counts.validate()?;
    manifest.content_digest = content_digest(dir)?;
    manifest.digest = manifest.compute_digest();
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// SHA-256 over records.jsonl and every chart file, in sorted path order.
pub fn content_digest(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let records = dir.join(RECORDS_FILE);
    hasher.update(RECORDS_FILE.as_bytes());
    hasher.update(fs::read(&records)?);
    let charts = dir.join(CHARTS_DIR);
    if charts.exists() {
        let mut ids: Vec<String> = fs::read_dir(&charts)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        for id in ids {
            for file in [crate::sandbox::FIGURE_FILE, TABLE_FILE, SCRIPT_FILE, CHART_FILE] {
                let p = charts.join(&id).join(file);
                hasher.update(format!("{id}/{file}").as_bytes());
                hasher.update(fs::read(&p)?);
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// A complete dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<InstructionRecord>,
    pub charts: Vec<ChartRecord>,
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::IncompleteDataset { path: dir.to_path_buf() });
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn read_records(path: &Path) -> Result<Vec<InstructionRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstructionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Read every `charts/<id>/chart.json` under `charts_dir`, sorted by id.
pub fn read_charts(charts_dir: &Path) -> Result<Vec<ChartRecord>> {
    let mut charts = Vec::new();
    if !charts_dir.exists() {
        return Ok(charts);
    }
    for entry in fs::read_dir(charts_dir)? {
        let path = entry?.path().join(CHART_FILE);
        if path.exists() {
            let chart: ChartRecord = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            charts.push(chart);
        }
    }
    charts.sort_by(|a, b| a.id().cmp(b.id()));
    Ok(charts)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = read_manifest(dir)?;
        let records = read_records(&dir.join(RECORDS_FILE))?;
        let charts = read_charts(&dir.join(CHARTS_DIR))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            records,
            charts,
        })
    }

    /// Compare the manifest with a full rescan of the directory.
    pub fn audit(&self) -> Result<()> {
        let rescanned = ManifestCounts::from_outputs(&self.charts, &self.records);
        let m = &self.manifest.counts;
        let mut problems = Vec::new();
        if m.records_total != rescanned.records_total {
            problems.push(format!("records: manifest {} vs {} on disk", m.records_total, rescanned.records_total));
        }
        if m.records_per_task != rescanned.records_per_task {
            problems.push("records per task differ from disk".to_string());
        }
        if m.rendered_ok != rescanned.rendered_ok {
            problems.push(format!("charts: manifest {} vs {} on disk", m.rendered_ok, rescanned.rendered_ok));
        }
        if m.charts_per_type != rescanned.charts_per_type {
            problems.push("charts per type differ from disk".to_string());
        }
        if let Err(e) = m.validate() {
            problems.push(e.to_string());
        }
        let ids: BTreeSet<&str> = self.charts.iter().map(|c| c.id()).collect();
        for r in &self.records {
            if !ids.contains(r.chart_id.as_str()) {
                problems.push(format!("record {} refers to missing chart {}", r.id, r.chart_id));
            }
        }
        for c in &self.charts {
            let figure = self.dir.join(&c.figure_path);
            if !crate::sandbox::has_png_magic(&figure) {
                problems.push(format!("chart {} figure missing or not a PNG", c.id()));
            }
        }
        match content_digest(&self.dir) {
            Ok(d) if d == self.manifest.content_digest => {}
            Ok(_) => problems.push("content digest mismatch".to_string()),
            Err(e) => problems.push(format!("content digest: {e}")),
        }
        if self.manifest.compute_digest() != self.manifest.digest {
            problems.push("manifest digest mismatch".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(format!("audit failed: {}", problems.join("; "))))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub name: String,
    pub count: usize,
    pub percent: f64,
}

fn shares(counts: &BTreeMap<String, usize>) -> Vec<Share> {
    let total: usize = counts.values().sum();
    let mut out: Vec<Share> = counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(name, &count)| Share {
            name: name.clone(),
            count,
            percent: if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 },
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.name.cmp(&b.name)));
    out
}

/// Task-kind and chart-type distribution of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_records: usize,
    pub total_charts: usize,
    pub records_per_chart: f64,
    pub tasks: Vec<Share>,
    pub chart_types: Vec<Share>,
}

pub fn compute_stats(charts: &[ChartRecord], records: &[InstructionRecord]) -> DatasetStats {
    let counts = ManifestCounts::from_outputs(charts, records);
    DatasetStats {
        total_records: records.len(),
        total_charts: charts.len(),
        records_per_chart: if charts.is_empty() {
            0.0
        } else {
            records.len() as f64 / charts.len() as f64
        },
        tasks: shares(&counts.records_per_task),
        chart_types: shares(&counts.charts_per_type),
    }
}

/// Statistics of the complete dataset in `dir`.
pub fn stats(dir: &Path) -> Result<DatasetStats> {
    let ds = Dataset::load(dir)?;
    Ok(compute_stats(&ds.charts, &ds.records))
}

impl DatasetStats {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "charts: {}  records: {}  records per chart: {:.2}\n",
            self.total_charts, self.total_records, self.records_per_chart
        );
        for (title, rows) in [("task", &self.tasks), ("chart type", &self.chart_types)] {
            let width = rows.iter().map(|s| s.name.len()).chain([title.len()]).max().unwrap_or(0);
            let cw = rows.iter().map(|s| s.count.to_string().len()).chain([5]).max().unwrap_or(5);
            out.push('\n');
            out.push_str(&format!("{title:<width$}  {:>cw$}  {:>7}\n", "count", "percent"));
            for s in rows.iter() {
                out.push_str(&format!("{:<width$}  {:>cw$}  {:>6.2}%\n", s.name, s.count, s.percent));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub train_charts: Vec<String>,
    pub test_charts: Vec<String>,
    pub train_records: usize,
    pub test_records: usize,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

/// Partition a dataset's records into train/test files by chart id, so every chart's
/// records land in exactly one split.
pub fn split(dir: &Path, fractions: (f64, f64), seed: u64) -> Result<SplitOutcome> {
    let (train_f, test_f) = fractions;
    if !(0.0..=1.0).contains(&train_f) || !(0.0..=1.0).contains(&test_f) || (train_f + test_f - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be in [0, 1] and sum to 1, got {train_f} and {test_f}"
        )));
    }
    let ds = Dataset::load(dir)?;
    let mut ids: Vec<String> = ds.charts.iter().map(|c| c.id().to_string()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (ids.len() as f64 * train_f).round() as usize;
    let mut train_charts: Vec<String> = ids[..n_train].to_vec();
    let mut test_charts: Vec<String> = ids[n_train..].to_vec();
    train_charts.sort();
    test_charts.sort();
    let train_set: BTreeSet<&str> = train_charts.iter().map(String::as_str).collect();

    let _lock = DatasetLock::acquire(dir)?;
    let (mut train, mut test) = (String::new(), String::new());
    let (mut train_records, mut test_records) = (0, 0);
    for r in &ds.records {
        let line = serde_json::to_string(r)? + "\n";
        if train_set.contains(r.chart_id.as_str()) {
            train.push_str(&line);
            train_records += 1;
        } else {
            test.push_str(&line);
            test_records += 1;
        }
    }
    let train_path = dir.join(SPLITS_DIR).join("train.jsonl");
    let test_path = dir.join(SPLITS_DIR).join("test.jsonl");
    write_atomic(&train_path, train.as_bytes())?;
    write_atomic(&test_path, test.as_bytes())?;
    Ok(SplitOutcome {
        train_charts,
        test_charts,
        train_records,
        test_records,
        train_path,
        test_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChartSeed, ChartType, GenerationSpec, Provenance, RenderStatus, TableData, TaskKind, Turn};
    use crate::sandbox::TINY_PNG;

    fn chart(id: &str, chart_type: ChartType) -> ChartRecord {
        ChartRecord {
            seed: ChartSeed {
                id: id.into(),
                spec: GenerationSpec {
                    theme: "t".into(),
                    trends: vec![],
                    n_rows: 1,
                    n_cols: 2,
                    chart_type,
                    reference_table: None,
                    rng_seed: 0,
                },
                table: TableData::from_text_rows(&["k", "v"], &[&["a", "100"]]).unwrap(),
                data_description: "d".into(),
                figure_intent: "f".into(),
                figure_description: "f".into(),
            },
            script: "plt.savefig('figure.png')".into(),
            figure_path: format!("charts/{id}/figure.png"),
            render_status: RenderStatus::Ok,
            diagnostic: String::new(),
        }
    }

    fn record(chart_id: &str, task: TaskKind, n: usize) -> InstructionRecord {
        let answer = if task.produces_code() {
            "```python\nplt.savefig('figure.png')\n```".to_string()
        } else {
            "42".to_string()
        };
        InstructionRecord {
            id: format!("{chart_id}-{task}-{n}"),
            chart_id: chart_id.into(),
            image: format!("charts/{chart_id}/figure.png"),
            task,
            conversations: vec![Turn::human("<image>\nq?"), Turn::assistant(answer)],
            provenance: Provenance {
                backend: "scripted".into(),
                prompt_digest: "00".into(),
            },
        }
    }

    fn staged(charts: &[ChartRecord]) -> tempfile::TempDir {
        let root = tempfile::tempdir().unwrap();
        for c in charts {
            let p = root.path().join(&c.figure_path);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, TINY_PNG).unwrap();
        }
        root
    }

    fn write(dir: &Path, charts: &[ChartRecord], records: &[InstructionRecord], force: bool) -> Result<DatasetManifest> {
        let stage = staged(charts);
        let manifest = DatasetManifest::new("cfg", 7, ManifestCounts::default());
        write_dataset(dir, charts, records, manifest, stage.path(), WriteOptions { force })
    }

    #[test]
    fn layout_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let charts = [chart("c1", ChartType::Bar)];
        let records: Vec<_> = (1..=3).map(|i| record("c1", TaskKind::Qa, i)).collect();
        let m = write(dir.path(), &charts, &records, false).unwrap();
        assert_eq!(m.counts.records_total, 3);
        let text = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 3);
        for f in ["figure.png", TABLE_FILE, SCRIPT_FILE, CHART_FILE] {
            assert!(dir.path().join("charts/c1").join(f).exists(), "{f}");
        }
        assert!(!dir.path().join(LOCK_FILE).exists());
        let ds = Dataset::load(dir.path()).unwrap();
        ds.audit().unwrap();
        assert_eq!(ds.records, records);
    }

    #[test]
    fn refuses_rewrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let charts = [chart("c1", ChartType::Bar)];
        let records = [record("c1", TaskKind::Qa, 1)];
        write(dir.path(), &charts, &records, false).unwrap();
        assert!(matches!(write(dir.path(), &charts, &records, false), Err(Error::Dataset(_))));
        write(dir.path(), &charts, &records, true).unwrap();
    }

    #[test]
    fn missing_manifest_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &[chart("c1", ChartType::Pie)], &[record("c1", TaskKind::Qa, 1)], false).unwrap();
        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::IncompleteDataset { .. })));
        assert!(stats(dir.path()).is_err());
    }

    #[test]
    fn digest_ignores_created_at() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let charts = [chart("c1", ChartType::Bar)];
        let records = [record("c1", TaskKind::Qa, 1)];
        let mut ma = write(a.path(), &charts, &records, false).unwrap();
        let mb = write(b.path(), &charts, &records, false).unwrap();
        ma.created_at = "0".into();
        assert_eq!(ma.compute_digest(), mb.digest);
    }

    #[test]
    fn audit_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &[chart("c1", ChartType::Bar)], &[record("c1", TaskKind::Qa, 1)], false).unwrap();
        let extra = serde_json::to_string(&record("c1", TaskKind::Qa, 2)).unwrap();
        let mut f = fs::OpenOptions::new().append(true).open(dir.path().join(RECORDS_FILE)).unwrap();
        writeln!(f, "{extra}").unwrap();
        assert!(Dataset::load(dir.path()).unwrap().audit().is_err());
    }

    #[test]
    fn stats_percentages() {
        let charts: Vec<_> = (0..10).map(|i| chart(&format!("c{i}"), ChartType::Bar)).collect();
        let mut records = Vec::new();
        for i in 0..50 {
            records.push(record(&format!("c{}", i % 10), TaskKind::Qa, i));
        }
        for task in [
            TaskKind::ChartToText,
            TaskKind::DetailedDescription,
            TaskKind::ChartExtraction,
            TaskKind::ChartToChart,
            TaskKind::ChartEditing,
        ] {
            for i in 0..10 {
                records.push(record(&format!("c{i}"), task, 0));
            }
        }
        let s = compute_stats(&charts, &records);
        assert_eq!(s.tasks[0].name, "qa");
        assert_eq!(s.tasks[0].percent, 50.0);
        let sum: f64 = s.tasks.iter().map(|t| t.percent).sum();
        assert!((sum - 100.0).abs() <= 0.1);
        assert_eq!(s.records_per_chart, 10.0);
        assert!(s.render_text().contains("qa"));
    }

    #[test]
    fn single_record_is_all() {
        let s = compute_stats(&[chart("c", ChartType::Line)], &[record("c", TaskKind::ChartToText, 1)]);
        assert_eq!(s.tasks.len(), 1);
        assert_eq!(s.tasks[0].percent, 100.0);
    }

    #[test]
    fn split_by_chart() {
        let dir = tempfile::tempdir().unwrap();
        let charts: Vec<_> = (0..10).map(|i| chart(&format!("c{i}"), ChartType::Bar)).collect();
        let records: Vec<_> = (0..30).map(|i| record(&format!("c{}", i % 10), TaskKind::Qa, i)).collect();
        write(dir.path(), &charts, &records, false).unwrap();
        let a = split(dir.path(), (0.8, 0.2), 7).unwrap();
        assert_eq!((a.train_charts.len(), a.test_charts.len()), (8, 2));
        assert_eq!(a.train_records + a.test_records, 30);
        let b = split(dir.path(), (0.8, 0.2), 7).unwrap();
        assert_eq!(a.train_charts, b.train_charts);

        let train = read_records(&a.train_path).unwrap();
        let test = read_records(&a.test_path).unwrap();
        let tr: BTreeSet<_> = train.iter().map(|r| r.chart_id.clone()).collect();
        let te: BTreeSet<_> = test.iter().map(|r| r.chart_id.clone()).collect();
        assert!(tr.is_disjoint(&te));
        assert_eq!(tr.len() + te.len(), 10);
        assert!(split(dir.path(), (0.5, 0.6), 7).is_err());
    }

    #[test]
    fn lock_blocks_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DatasetLock::acquire(dir.path()).unwrap();
        let err = write(dir.path(), &[chart("c1", ChartType::Bar)], &[record("c1", TaskKind::Qa, 1)], false);
        assert!(matches!(err, Err(Error::Dataset(m)) if m.contains("locked")));
    }
}
