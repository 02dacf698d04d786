//! Domain types shared by every stage, and the data validators that keep generated
//! tables inside each chart type's constraints.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on the sum of pie percentages.
pub const PIE_SUM_TOLERANCE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartType {
    Bar,
    Line,
    Pie,
    Funnel,
    Gantt,
    Heatmap,
    Scatter,
    Box,
    Candlestick,
    Area,
}

/// What a table must satisfy to be plotted as a given chart type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintProfile {
    /// Every numeric value column sums to 100.
    PercentageSum,
    /// Open/high/low/close columns with high above and low below the body.
    Ohlc,
    /// Every value cell is numeric.
    AllNumeric,
    /// At least one fully numeric value column.
    AnyNumeric,
}

impl ChartType {
    pub const ALL: [ChartType; 10] = [
        ChartType::Bar,
        ChartType::Line,
        ChartType::Pie,
        ChartType::Funnel,
        ChartType::Gantt,
        ChartType::Heatmap,
        ChartType::Scatter,
        ChartType::Box,
        ChartType::Candlestick,
        ChartType::Area,
    ];

    /// Chart types that are uncommon in existing chart corpora.
    pub const SPECIAL: [ChartType; 6] = [
        ChartType::Funnel,
        ChartType::Gantt,
        ChartType::Heatmap,
        ChartType::Scatter,
        ChartType::Box,
        ChartType::Candlestick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChartType::Bar => "bar",
            ChartType::Line => "line",
            ChartType::Pie => "pie",
            ChartType::Funnel => "funnel",
            ChartType::Gantt => "gantt",
            ChartType::Heatmap => "heatmap",
            ChartType::Scatter => "scatter",
            ChartType::Box => "box",
            ChartType::Candlestick => "candlestick",
            ChartType::Area => "area",
        }
    }

    pub fn constraint_profile(self) -> ConstraintProfile {
        match self {
            ChartType::Pie => ConstraintProfile::PercentageSum,
            ChartType::Candlestick => ConstraintProfile::Ohlc,
            ChartType::Heatmap => ConstraintProfile::AllNumeric,
            _ => ConstraintProfile::AnyNumeric,
        }
    }

    /// Number of value columns the chart type dictates, if fixed.
    pub fn fixed_value_columns(self) -> Option<usize> {
        match self {
            ChartType::Pie => Some(1),
            ChartType::Candlestick => Some(4),
            _ => None,
        }
    }

    /// Plain-language statement of the constraint, repeated in generation prompts.
    pub fn constraint_text(self) -> &'static str {
        match self.constraint_profile() {
            ConstraintProfile::PercentageSum => {
                "The values are percentages of a whole: the value column must sum to exactly 100 (100%)."
            }
            ConstraintProfile::Ohlc => {
                "Use exactly four numeric value columns named Open, High, Low, Close; in every row High must be at least max(Open, Close) and Low at most min(Open, Close)."
            }
            ConstraintProfile::AllNumeric => "Every value cell must be a plain number.",
            ConstraintProfile::AnyNumeric => {
                "Value columns must contain plain numbers (no units or thousands separators inside cells)."
            }
        }
    }
}

impl fmt::Display for ChartType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChartType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let needle = s.trim().to_ascii_lowercase();
        ChartType::ALL
            .into_iter()
            .find(|t| t.name() == needle)
            .ok_or_else(|| Error::invalid(format!("unknown chart type {s:?}")))
    }
}

/// Programmatic surrogate for a free-text trend phrase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendVerifier {
    MonotoneUp,
    MonotoneDown,
    Spike,
    Dip,
    Flat,
    Oscillating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub label: String,
    pub verifier: TrendVerifier,
    /// Noise tolerance, a fraction in `[0, 1)`.
    pub tolerance: f64,
}

impl TrendSpec {
    pub fn new(label: impl Into<String>, verifier: TrendVerifier, tolerance: f64) -> Result<Self> {
        let spec = TrendSpec {
            label: label.into(),
            verifier,
            tolerance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::invalid("trend label is empty"));
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(Error::invalid(format!(
                "trend tolerance {} outside [0, 1)",
                self.tolerance
            )));
        }
        Ok(())
    }

    /// The shipped phrase vocabulary, one verifier per phrase.
    pub fn builtin() -> Vec<TrendSpec> {
        use TrendVerifier::*;
        [
            ("steadily increasing", MonotoneUp, 0.05),
            ("steadily decreasing", MonotoneDown, 0.05),
            ("a sudden spike", Spike, 0.1),
            ("a sudden drop", Dip, 0.1),
            ("roughly stable", Flat, 0.2),
            ("fluctuating up and down", Oscillating, 0.05),
        ]
        .into_iter()
        .map(|(label, verifier, tolerance)| TrendSpec {
            label: label.to_string(),
            verifier,
            tolerance,
        })
        .collect()
    }
}

/// A table cell. Numeric cells keep their source text next to the parsed value; a cell
/// is numeric exactly when its trimmed text parses as a finite real.
#[derive(Clone, Debug)]
pub struct Cell {
    raw: String,
    value: Option<f64>,
}

impl Cell {
    pub fn parse(text: &str) -> Cell {
        let raw = text.trim().to_string();
        let value = raw.parse::<f64>().ok().filter(|v| v.is_finite());
        Cell { raw, value }
    }

    pub fn number(value: f64) -> Cell {
        Cell::parse(&format_number(value))
    }

    pub fn text(&self) -> &str {
        &self.raw
    }

    pub fn as_f64(&self) -> Option<f64> {
        self.value
    }

    pub fn is_numeric(&self) -> bool {
        self.value.is_some()
    }
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        match (self.value, other.value) {
            (Some(a), Some(b)) => a == b,
            (None, None) => self.raw == other.raw,
            _ => false,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Ok(Cell::parse(&raw))
    }
}

/// Shortest decimal text for a finite value, without a trailing `.0` on integers.
pub fn format_number(value: f64) -> String {
    if value.fract() == 0.0 && value.abs() < 1e15 {
        format!("{}", value as i64)
    } else {
        format!("{value}")
    }
}

/// A table with a key column. `column_headers[0]` names the key column; each row of
/// `values` holds one cell per remaining header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct TableData {
    column_headers: Vec<String>,
    row_keys: Vec<String>,
    values: Vec<Vec<Cell>>,
}

#[derive(Deserialize)]
struct RawTable {
    column_headers: Vec<String>,
    row_keys: Vec<String>,
    values: Vec<Vec<Cell>>,
}

impl TryFrom<RawTable> for TableData {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        TableData::new(raw.column_headers, raw.row_keys, raw.values)
    }
}

impl TableData {
    pub fn new(column_headers: Vec<String>, row_keys: Vec<String>, values: Vec<Vec<Cell>>) -> Result<Self> {
        if column_headers.is_empty() {
            return Err(Error::invalid("table has no key column header"));
        }
        let mut seen = BTreeSet::new();
        for header in &column_headers {
            if !seen.insert(header.as_str()) {
                return Err(Error::invalid(format!("duplicate column header {header:?}")));
            }
        }
        if row_keys.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} row keys for {} value rows",
                row_keys.len(),
                values.len()
            )));
        }
        let width = column_headers.len() - 1;
        for (i, row) in values.iter().enumerate() {
            if row.len() != width {
                return Err(Error::invalid(format!(
                    "row {i} has {} value cells, expected {width}",
                    row.len()
                )));
            }
        }
        Ok(TableData {
            column_headers,
            row_keys,
            values,
        })
    }

    /// Build from rows of text, the first column of each row being its key.
    pub fn from_text_rows(headers: &[&str], rows: &[&[&str]]) -> Result<Self> {
        let mut keys = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        for row in rows {
            let (key, rest) = row
                .split_first()
                .ok_or_else(|| Error::invalid("empty row"))?;
            keys.push(key.trim().to_string());
            values.push(rest.iter().map(|c| Cell::parse(c)).collect());
        }
        TableData::new(headers.iter().map(|h| h.trim().to_string()).collect(), keys, values)
    }

    pub fn column_headers(&self) -> &[String] {
        &self.column_headers
    }

    pub fn key_header(&self) -> &str {
        &self.column_headers[0]
    }

    pub fn value_headers(&self) -> &[String] {
        &self.column_headers[1..]
    }

    pub fn row_keys(&self) -> &[String] {
        &self.row_keys
    }

    pub fn values(&self) -> &[Vec<Cell>] {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.row_keys.len()
    }

    pub fn n_value_cols(&self) -> usize {
        self.column_headers.len() - 1
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = &Cell> + '_ {
        self.values.iter().map(move |row| &row[idx])
    }

    /// Numeric values of value column `idx`, or `None` if any cell is text.
    pub fn numeric_column(&self, idx: usize) -> Option<Vec<f64>> {
        self.column(idx).map(Cell::as_f64).collect()
    }

    pub fn numeric_column_indices(&self) -> Vec<usize> {
        (0..self.n_value_cols())
            .filter(|&i| self.n_rows() > 0 && self.numeric_column(i).is_some())
            .collect()
    }

    /// Serialise as CSV: header row, then one row per key.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        writer
            .write_record(&self.column_headers)
            .expect("in-memory csv write");
        for (key, row) in self.row_keys.iter().zip(&self.values) {
            let mut record = Vec::with_capacity(row.len() + 1);
            record.push(key.as_str());
            record.extend(row.iter().map(Cell::text));
            writer.write_record(&record).expect("in-memory csv write");
        }
        let bytes = writer.into_inner().expect("in-memory csv flush");
        let mut text = String::from_utf8(bytes).expect("csv of utf-8 input");
        if text.ends_with('\n') {
            text.pop();
        }
        text
    }

    /// Parse the CSV contract: a header row, then rows whose first cell is the key.
    /// Ragged rows are rejected with the offending 1-based data row number.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.trim().as_bytes());
        let mut records = reader.records();
        let header = match records.next() {
            Some(r) => r?,
            None => return Err(Error::format("csv block is empty")),
        };
        let headers: Vec<String> = header.iter().map(str::to_string).collect();
        if headers.len() < 2 {
            return Err(Error::format("csv header needs a key column and at least one value column"));
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (i, record) in records.enumerate() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(Error::format(format!(
                    "csv data row {} has {} cells, header has {}",
                    i + 1,
                    record.len(),
                    headers.len()
                )));
            }
            keys.push(record[0].to_string());
            values.push(record.iter().skip(1).map(Cell::parse).collect());
        }
        TableData::new(headers, keys, values).map_err(|e| Error::format(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub theme: String,
    pub trends: Vec<TrendSpec>,
    pub n_rows: usize,
    /// Key column plus value columns.
    pub n_cols: usize,
    pub chart_type: ChartType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_table: Option<TableData>,
    pub rng_seed: u64,
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.theme.trim().is_empty() {
            return Err(Error::invalid("theme is empty"));
        }
        if self.n_rows < 1 {
            return Err(Error::invalid("n_rows must be at least 1"));
        }
        if self.n_cols < 2 {
            return Err(Error::invalid("n_cols must be at least 2 (key + value column)"));
        }
        if self.trends.len() > self.n_cols - 1 {
            return Err(Error::invalid(format!(
                "{} trends for {} value columns",
                self.trends.len(),
                self.n_cols - 1
            )));
        }
        self.trends.iter().try_for_each(TrendSpec::validate)
    }

    pub fn n_value_cols(&self) -> usize {
        self.n_cols.saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartSeed {
    pub id: String,
    pub spec: GenerationSpec,
    pub table: TableData,
    pub data_description: String,
    /// Intended appearance of the chart, written alongside the data.
    pub figure_intent: String,
    /// Set once the chart has rendered.
    #[serde(default)]
    pub figure_description: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStatus {
    Ok,
    ExecError,
    Timeout,
    NoFigure,
}

impl RenderStatus {
    pub fn name(self) -> &'static str {
        match self {
            RenderStatus::Ok => "ok",
            RenderStatus::ExecError => "exec_error",
            RenderStatus::Timeout => "timeout",
            RenderStatus::NoFigure => "no_figure",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartRecord {
    pub seed: ChartSeed,
    pub script: String,
    /// Relative path of the rendered figure; empty unless `render_status` is ok.
    pub figure_path: String,
    pub render_status: RenderStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostic: String,
}

impl ChartRecord {
    pub fn id(&self) -> &str {
        &self.seed.id
    }

    pub fn chart_type(&self) -> ChartType {
        self.seed.spec.chart_type
    }

    pub fn is_ok(&self) -> bool {
        self.render_status == RenderStatus::Ok
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_ok() == self.figure_path.is_empty() {
            return Err(Error::contract(format!(
                "chart {}: figure_path must be set exactly when render_status is ok",
                self.id()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Qa,
    ChartToText,
    ChartExtraction,
    DetailedDescription,
    ChartToChart,
    TextToChart,
    ChartEditing,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Qa,
        TaskKind::ChartToText,
        TaskKind::ChartExtraction,
        TaskKind::DetailedDescription,
        TaskKind::ChartToChart,
        TaskKind::TextToChart,
        TaskKind::ChartEditing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Qa => "qa",
            TaskKind::ChartToText => "chart_to_text",
            TaskKind::ChartExtraction => "chart_extraction",
            TaskKind::DetailedDescription => "detailed_description",
            TaskKind::ChartToChart => "chart_to_chart",
            TaskKind::TextToChart => "text_to_chart",
            TaskKind::ChartEditing => "chart_editing",
        }
    }

    /// Tasks whose answer is a plotting script.
    pub fn produces_code(self) -> bool {
        matches!(
            self,
            TaskKind::ChartToChart | TaskKind::TextToChart | TaskKind::ChartEditing
        )
    }

    /// Tasks whose human turn shows the chart image.
    pub fn takes_image(self) -> bool {
        self != TaskKind::TextToChart
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let needle = s.trim().to_ascii_lowercase().replace('-', "_");
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == needle)
            .ok_or_else(|| Error::invalid(format!("unknown task kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: Role,
    pub value: String,
}

impl Turn {
    pub fn human(value: impl Into<String>) -> Self {
        Turn {
            from: Role::Human,
            value: value.into(),
        }
    }

    pub fn assistant(value: impl Into<String>) -> Self {
        Turn {
            from: Role::Assistant,
            value: value.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub prompt_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub chart_id: String,
    /// Figure path relative to the dataset root.
    pub image: String,
    pub task: TaskKind,
    pub conversations: Vec<Turn>,
    pub provenance: Provenance,
}

impl InstructionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.conversations.is_empty() || !self.conversations.len().is_multiple_of(2) {
            return Err(Error::contract(format!(
                "record {}: conversations must hold complete human/assistant pairs",
                self.id
            )));
        }
        for (i, turn) in self.conversations.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::Human } else { Role::Assistant };
            if turn.from != expected {
                return Err(Error::contract(format!(
                    "record {}: turn {i} should be {expected:?}",
                    self.id
                )));
            }
        }
        if self.task.produces_code() {
            let last = &self.conversations[self.conversations.len() - 1];
            if crate::fence::scan(&last.value).blocks.is_empty() {
                return Err(Error::contract(format!(
                    "record {}: final answer of a code task lacks a fenced block",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Counters of samples dropped by the format and execution filters, keyed by reason.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterStats(std::collections::BTreeMap<String, usize>);

impl FilterStats {
    pub fn record(&mut self, reason: &str) {
        *self.0.entry(reason.to_string()).or_default() += 1;
    }

    pub fn get(&self, reason: &str) -> usize {
        self.0.get(reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn merge(&mut self, other: &FilterStats) {
        for (k, v) in &other.0 {
            *self.0.entry(k.clone()).or_default() += v;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Outcome of [`validate_table`]. Violations are data, not errors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a table against the constraint profile of `chart_type`, returning every violation.
pub fn validate_table(table: &TableData, chart_type: ChartType) -> ValidationReport {
    let mut violations = Vec::new();
    if table.n_rows() == 0 {
        violations.push("table has no rows".to_string());
    }
    if table.n_value_cols() == 0 {
        violations.push("table has no value columns".to_string());
    }
    if !violations.is_empty() {
        return ValidationReport { violations };
    }

    match chart_type.constraint_profile() {
        ConstraintProfile::PercentageSum => {
            let numeric = table.numeric_column_indices();
            if numeric.is_empty() {
                violations.push("pie needs a numeric value column".to_string());
            }
            for idx in numeric {
                let sum: f64 = table.numeric_column(idx).unwrap_or_default().iter().sum();
                if (sum - 100.0).abs() > PIE_SUM_TOLERANCE {
                    let shown = (sum * 1e6).round() / 1e6;
                    violations.push(format!(
                        "pie sum {} ∉ 100±{}",
                        format_number(shown),
                        format_number(PIE_SUM_TOLERANCE)
                    ));
                }
            }
        }
        ConstraintProfile::Ohlc => check_ohlc(table, &mut violations),
        ConstraintProfile::AllNumeric => {
            for (r, row) in table.values().iter().enumerate() {
                for (c, cell) in row.iter().enumerate() {
                    if !cell.is_numeric() {
                        violations.push(format!(
                            "{chart_type} cell ({}, {}) is not numeric: {:?}",
                            table.row_keys()[r],
                            table.value_headers()[c],
                            cell.text()
                        ));
                    }
                }
            }
        }
        ConstraintProfile::AnyNumeric => {
            if table.numeric_column_indices().is_empty() {
                violations.push(format!("{chart_type} needs at least one numeric value column"));
            }
        }
    }
    ValidationReport { violations }
}

fn check_ohlc(table: &TableData, violations: &mut Vec<String>) {
    let numeric = table.numeric_column_indices();
    if numeric.len() < 4 {
        violations.push(format!(
            "candlestick needs 4 numeric columns (open, high, low, close), found {}",
            numeric.len()
        ));
        return;
    }
    // Named columns win; otherwise the first four numeric columns are open, high, low, close.
    let find = |name: &str| {
        numeric
            .iter()
            .copied()
            .find(|&i| table.value_headers()[i].trim().eq_ignore_ascii_case(name))
    };
    let named = ["open", "high", "low", "close"].map(find);
    let [open, high, low, close] = if named.iter().all(Option::is_some) {
        named.map(Option::unwrap)
    } else {
        [numeric[0], numeric[1], numeric[2], numeric[3]]
    };

    for (r, row) in table.values().iter().enumerate() {
        let get = |i: usize| row[i].as_f64().unwrap_or(f64::NAN);
        let (o, h, l, c) = (get(open), get(high), get(low), get(close));
        let key = &table.row_keys()[r];
        if h < o {
            violations.push(format!("row {key}: high < open"));
        }
        if h < c {
            violations.push(format!("row {key}: high < close"));
        }
        if l > o {
            violations.push(format!("row {key}: low > open"));
        }
        if l > c {
            violations.push(format!("row {key}: low > close"));
        }
    }
}

/// Does `series` follow `trend`? Series must hold at least two points.
pub fn check_trend(series: &[f64], trend: &TrendSpec) -> Result<bool> {
    if series.len() < 2 {
        return Err(Error::invalid(format!(
            "trend check needs at least 2 points, got {}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("trend check on non-finite values"));
    }
    let tol = trend.tolerance;
    let (min, max) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    let deltas = series.windows(2).map(|w| w[1] - w[0]);

    let ok = match trend.verifier {
        TrendVerifier::MonotoneUp => deltas.into_iter().all(|d| d >= -tol * range),
        TrendVerifier::MonotoneDown => deltas.into_iter().all(|d| d <= tol * range),
        TrendVerifier::Spike | TrendVerifier::Dip => {
            let mut sorted = series.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = quantile(&sorted, 0.5);
            let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
            // The tolerance sets a noise floor under the IQR threshold.
            let threshold = (2.0 * iqr).max(tol * range);
            let outliers = series
                .iter()
                .filter(|&&v| match trend.verifier {
                    TrendVerifier::Spike => v - median > threshold,
                    _ => median - v > threshold,
                })
                .count();
            outliers == 1
        }
        TrendVerifier::Flat => {
            let mut sorted = series.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = quantile(&sorted, 0.5);
            if median == 0.0 {
                range <= tol
            } else {
                range <= tol * median.abs()
            }
        }
        TrendVerifier::Oscillating => {
            let signs: Vec<bool> = deltas.filter(|d| d.abs() > tol * range).map(|d| d > 0.0).collect();
            let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
            changes >= 2 && 2 * changes >= signs.len().saturating_sub(1)
        }
    };
    Ok(ok)
}

/// Linearly interpolated quantile of an ascending slice.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
