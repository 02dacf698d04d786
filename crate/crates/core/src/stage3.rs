//! Stage 3: instruction/answer records for seven task kinds from every rendered chart.
//!
//! The model sees both descriptions, the full table and (for code tasks) the plotting
//! script. Two answers never come from the model: chart extraction answers are the
//! ground-truth table, and text-to-chart answers are the script that already rendered.
//! Every code answer is executed again before a record is kept.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence;
use crate::llm::{ChatRequest, Gateway, DEFAULT_MODEL, GENERATION_TEMPERATURE};
use crate::model::{ChartRecord, FilterStats, InstructionRecord, Provenance, RenderStatus, TableData, TaskKind, Turn};
use crate::sandbox::{has_png_magic, Sandbox, SandboxRequest, DEFAULT_TIMEOUT_S};

pub const SYSTEM_PROMPT: &str = "You write high-quality instruction-tuning data about charts. \
You are given everything used to create a chart and follow the requested output format exactly.";

pub const DEFAULT_QA_PAIRS: usize = 5;
pub const DEFAULT_ICL: usize = 1;

pub const IMAGE_TOKEN: &str = "<image>";

pub const LABEL_INSTRUCTION: &str = "instruction";
pub const LABEL_ANSWER: &str = "answer";
pub const LABEL_CSV: &str = "csv";
pub const LABEL_CODE: &str = "python";

/// A chart characteristic a question can target.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CharacteristicTag(String);

impl CharacteristicTag {
    pub fn new(tag: impl Into<String>) -> Result<Self> {
        let tag = tag.into();
        if tag.trim().is_empty() {
            return Err(Error::invalid("characteristic tag is empty"));
        }
        Ok(CharacteristicTag(tag.trim().to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn builtin_vocabulary() -> Vec<CharacteristicTag> {
        [
            "extremum",
            "comparison",
            "trend",
            "proportion",
            "axis-reading",
            "aggregate",
            "counterfactual",
        ]
        .into_iter()
        .map(|t| CharacteristicTag(t.to_string()))
        .collect()
    }
}

/// A worked example shown to the model for one task kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage3Exemplar {
    pub task: TaskKind,
    pub text: String,
}

/// The shipped worked examples, one or two per task kind.
pub fn builtin_exemplars() -> Vec<Stage3Exemplar> {
    let ex = |task, text: &str| Stage3Exemplar {
        task,
        text: text.to_string(),
    };
    vec![
        ex(
            TaskKind::Qa,
            "```question-1\nWhich month had the highest rainfall?\n```\n```answer-1\nMarch, with 112 mm.\n```",
        ),
        ex(
            TaskKind::Qa,
            "```question-1\nWhat share of the total does the largest slice represent?\n```\n```answer-1\n42%\n```",
        ),
        ex(
            TaskKind::ChartToText,
            "```instruction\nSummarise what this chart shows.\n```\n```answer\nThe chart compares monthly rainfall in 2023. Rain peaks in March at 112 mm and falls to a low of 18 mm in July.\n```",
        ),
        ex(
            TaskKind::DetailedDescription,
            "```instruction\nDescribe this chart in detail, covering both its data and its appearance.\n```\n```answer\nThis is a vertical bar chart titled \"Monthly Rainfall, 2023\" with months on the x axis and rainfall in millimetres on the y axis. The bars are teal with value labels. Rainfall rises from 64 mm in January to a peak of 112 mm in March, then declines through summer to 18 mm in July.\n```",
        ),
        ex(
            TaskKind::ChartExtraction,
            "```instruction\nExtract the underlying data table of this chart as CSV.\n```\n```csv\nMonth,Rainfall\nJan,64\nFeb,81\nMar,112\n```",
        ),
        ex(
            TaskKind::ChartToChart,
            "```instruction\nWrite Matplotlib code that redraws this chart.\n```\n```python\nimport matplotlib.pyplot as plt\nmonths = ['Jan', 'Feb', 'Mar']\nrain = [64, 81, 112]\nfig, ax = plt.subplots()\nax.bar(months, rain, color='teal', label='Rainfall')\nax.set_title('Monthly Rainfall, 2023')\nax.legend()\nplt.savefig('figure.png')\n```",
        ),
        ex(
            TaskKind::TextToChart,
            "```instruction\nUsing the table below, draw a bar chart of monthly rainfall with teal bars, a title and value labels.\n```",
        ),
        ex(
            TaskKind::ChartEditing,
            "```instruction\nChange the bars to horizontal and sort them by rainfall.\n```\n```python\nimport matplotlib.pyplot as plt\nmonths = ['Jan', 'Feb', 'Mar']\nrain = [64, 81, 112]\npairs = sorted(zip(rain, months))\nfig, ax = plt.subplots()\nax.barh([m for _, m in pairs], [r for r, _ in pairs], color='teal', label='Rainfall')\nax.set_title('Monthly Rainfall, 2023')\nax.legend()\nplt.savefig('figure.png')\n```",
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage3Prompt {
    pub task: TaskKind,
    pub system_text: String,
    pub user_text: String,
}

impl Stage3Prompt {
    pub fn to_request(&self, model_id: &str) -> ChatRequest {
        ChatRequest::new(&self.system_text, &self.user_text)
            .with_model(model_id)
            .with_temperature(GENERATION_TEMPERATURE)
            .with_max_tokens(3000)
    }
}

fn task_contract(task: TaskKind, tags: &[CharacteristicTag], n_pairs: usize) -> String {
    match task {
        TaskKind::Qa => {
            let names: Vec<&str> = tags.iter().map(CharacteristicTag::as_str).collect();
            format!(
                "Write {n_pairs} question-answer pairs about the chart. Each question targets a different one of these \
characteristics: {}. Questions must be answerable by looking at the chart; answers are short (a number, a label or one \
sentence). Use numbered fenced sections: ```question-1 then ```answer-1, then ```question-2 and ```answer-2, and so on.",
                names.join(", ")
            )
        }
        TaskKind::ChartToText => format!(
            "Write a request asking for a brief summary of the chart, then the summary itself (two to four sentences \
on the main message and trend). Use two fenced sections: ```{LABEL_INSTRUCTION} then ```{LABEL_ANSWER}."
        ),
        TaskKind::DetailedDescription => format!(
            "Write a request asking for a detailed description of the chart, then the description. It must cover the \
data characteristics (values, extremes, trends, comparisons) and the visual attributes (chart type, title, axes, \
colors, legend, annotations). Use two fenced sections: ```{LABEL_INSTRUCTION} then ```{LABEL_ANSWER}."
        ),
        TaskKind::ChartExtraction => format!(
            "Write a request asking to extract the chart's underlying data table, then the answer: the table \
re-serialized in CSV format with a header row whose first cell names the label column, one row per label, \
comma-separated, plain numbers only. Use two fenced sections: ```{LABEL_INSTRUCTION} then ```{LABEL_CSV}."
        ),
        TaskKind::ChartToChart => format!(
            "Write a request asking for code that redraws this chart, then a complete Matplotlib script that \
reproduces it (same data, chart type, title, axes and colors) and saves it with plt.savefig(\"figure.png\"). Use two \
fenced sections: ```{LABEL_INSTRUCTION} then ```{LABEL_CODE}. The answer must be a fenced code block."
        ),
        TaskKind::TextToChart => format!(
            "Write a request a user might make to draw this chart from its raw data: state the chart type and the \
styling wishes (colors, labels, annotations) matching the figure description. Do not include the data itself; it \
will be attached. Use one fenced section: ```{LABEL_INSTRUCTION}. The answer will be a fenced code block."
        ),
        TaskKind::ChartEditing => format!(
            "Invent a reasonable edit request for this chart (for example a different chart type, highlighting a \
value, changing colors or sorting), then write the edited version of the plotting script above that fulfils it and \
still saves with plt.savefig(\"figure.png\"). Use two fenced sections: ```{LABEL_INSTRUCTION} then ```{LABEL_CODE}. \
The answer must be a fenced code block."
        ),
    }
}

/// Build the generation prompt for one task on one rendered chart.
pub fn build_stage3_prompt(
    record: &ChartRecord,
    task: TaskKind,
    tags: &[CharacteristicTag],
    exemplars: &[Stage3Exemplar],
    k: usize,
    n_pairs: usize,
) -> Result<Stage3Prompt> {
    if !record.is_ok() {
        return Err(Error::contract(format!(
            "chart {} did not render; no instructions are generated for it",
            record.id()
        )));
    }
    let needs_script = matches!(task, TaskKind::ChartToChart | TaskKind::ChartEditing);
    if needs_script && record.script.trim().is_empty() {
        return Err(Error::contract(format!("{task} needs the chart's plotting script, but chart {} has none", record.id())));
    }
    if task == TaskKind::Qa && (n_pairs == 0 || tags.is_empty()) {
        return Err(Error::invalid("qa prompts need at least one pair and one characteristic tag"));
    }

    let seed = &record.seed;
    let mut user = String::new();
    user.push_str("Here is everything used to create a chart.\n\n");
    user.push_str(&format!("Chart type: {}\n", seed.spec.chart_type));
    user.push_str(&format!("Data description: {}\n", seed.data_description.trim()));
    user.push_str(&format!("Figure description: {}\n", seed.figure_description.trim()));
    user.push_str("Raw data:\n");
    user.push_str(&fence::wrap(LABEL_CSV, &seed.table.to_csv()));
    user.push('\n');
    if needs_script {
        user.push_str("Plotting script of the chart:\n");
        user.push_str(&fence::wrap(LABEL_CODE, &record.script));
        user.push('\n');
    }
    user.push_str(&format!("\nTask: {task}\n"));
    user.push_str(&task_contract(task, tags, n_pairs));
    user.push('\n');

    let examples: Vec<&Stage3Exemplar> = exemplars.iter().filter(|e| e.task == task).take(k).collect();
    if !examples.is_empty() {
        user.push_str("\nExample of the expected format (for a different chart):\n");
        for ex in examples {
            user.push_str(&ex.text);
            user.push('\n');
        }
    }

    Ok(Stage3Prompt {
        task,
        system_text: SYSTEM_PROMPT.to_string(),
        user_text: user,
    })
}

/// One instruction/answer pair as written by the model, before it becomes a record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub instruction: String,
    /// Empty for text-to-chart, whose answer is the chart's own script.
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedStage3 {
    pub fragments: Vec<Fragment>,
    /// Malformed question/answer pairs skipped while parsing.
    pub dropped: usize,
}

fn block_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let scan = fence::scan(text);
    if let Some(line) = scan.unterminated {
        return Err(Error::format(format!("unterminated fenced section opened on line {line}")));
    }
    Ok(scan
        .blocks
        .into_iter()
        .map(|b| (fence::normalize_label(&b.label), b.body.trim().to_string()))
        .collect())
}

fn numbered(label: &str, prefix: &str) -> Option<usize> {
    label.strip_prefix(prefix)?.trim_start_matches('-').parse().ok()
}

pub fn parse_stage3_output(text: &str, task: TaskKind) -> Result<ParsedStage3> {
    let blocks = block_pairs(text)?;
    match task {
        TaskKind::Qa => {
            let mut questions: BTreeMap<usize, String> = BTreeMap::new();
            let mut answers: BTreeMap<usize, String> = BTreeMap::new();
            for (label, body) in blocks {
                if let Some(n) = numbered(&label, "question") {
                    questions.insert(n, body);
                } else if let Some(n) = numbered(&label, "answer") {
                    answers.insert(n, body);
                }
            }
            let mut fragments = Vec::new();
            let mut dropped = 0;
            let all: std::collections::BTreeSet<usize> = questions.keys().chain(answers.keys()).copied().collect();
            for n in all {
                match (questions.remove(&n), answers.remove(&n)) {
                    (Some(q), Some(a)) if !q.is_empty() && !a.is_empty() => fragments.push(Fragment {
                        instruction: q,
                        answer: a,
                    }),
                    _ => dropped += 1,
                }
            }
            if fragments.is_empty() {
                return Err(Error::format("no well-formed numbered question/answer sections"));
            }
            Ok(ParsedStage3 { fragments, dropped })
        }
        TaskKind::TextToChart => {
            let instruction = find_block(&blocks, &[LABEL_INSTRUCTION])?;
            Ok(single(instruction, String::new()))
        }
        TaskKind::ChartToText | TaskKind::DetailedDescription => {
            let instruction = find_block(&blocks, &[LABEL_INSTRUCTION])?;
            let answer = find_block(&blocks, &[LABEL_ANSWER])?;
            Ok(single(instruction, answer))
        }
        TaskKind::ChartExtraction => {
            let instruction = find_block(&blocks, &[LABEL_INSTRUCTION])?;
            let csv = find_block(&blocks, &[LABEL_CSV])?;
            let table = TableData::from_csv(&csv)?;
            Ok(single(instruction, table.to_csv()))
        }
        TaskKind::ChartToChart | TaskKind::ChartEditing => {
            let instruction = find_block(&blocks, &[LABEL_INSTRUCTION])?;
            let code = find_block(&blocks, &[LABEL_CODE, "py", ""])
                .map_err(|_| Error::format(format!("{task} answer lacks a fenced code block")))?;
            Ok(single(instruction, code))
        }
    }
}

fn single(instruction: String, answer: String) -> ParsedStage3 {
    ParsedStage3 {
        fragments: vec![Fragment { instruction, answer }],
        dropped: 0,
    }
}

fn find_block(blocks: &[(String, String)], labels: &[&str]) -> Result<String> {
    let found = blocks
        .iter()
        .find(|(l, _)| labels.contains(&l.as_str()))
        .map(|(_, b)| b.clone())
        .ok_or_else(|| Error::format(format!("missing ```{} section", labels[0])))?;
    if found.is_empty() {
        return Err(Error::format(format!("empty ```{} section", labels[0])));
    }
    Ok(found)
}

/// Parse a chart-extraction answer (fenced or bare CSV) back into a table.
pub fn parse_extraction_answer(answer: &str) -> Result<TableData> {
    let scan = fence::scan(answer);
    match scan.blocks.first() {
        Some(block) => TableData::from_csv(&block.body),
        None => TableData::from_csv(answer),
    }
}

/// Per-task settings and collaborators for [`synthesize`].
pub struct Stage3Context<'a> {
    pub gateway: &'a Gateway,
    pub sandbox: &'a dyn Sandbox,
    pub vocabulary: Vec<CharacteristicTag>,
    pub exemplars: Vec<Stage3Exemplar>,
    pub k: usize,
    pub n_pairs: usize,
    pub model_id: String,
    pub timeout_s: u64,
    pub scratch_root: std::path::PathBuf,
}

impl<'a> Stage3Context<'a> {
    pub fn new(gateway: &'a Gateway, sandbox: &'a dyn Sandbox) -> Self {
        Stage3Context {
            gateway,
            sandbox,
            vocabulary: CharacteristicTag::builtin_vocabulary(),
            exemplars: builtin_exemplars(),
            k: DEFAULT_ICL,
            n_pairs: DEFAULT_QA_PAIRS,
            model_id: DEFAULT_MODEL.to_string(),
            timeout_s: DEFAULT_TIMEOUT_S,
            scratch_root: std::env::temp_dir(),
        }
    }
}

pub const REASON_BACKEND: &str = "stage3_backend";
pub const REASON_FORMAT: &str = "stage3_format";
pub const REASON_QA_PAIR: &str = "stage3_malformed_qa_pair";
pub const REASON_RENDER: &str = "stage3_render_failed";

fn code_answer(script: &str) -> String {
    fence::wrap(LABEL_CODE, script)
}

fn verify_script(script: &str, ctx: &Stage3Context<'_>) -> Result<bool> {
    std::fs::create_dir_all(&ctx.scratch_root)?;
    let workdir = tempfile::Builder::new().prefix("verify-").tempdir_in(&ctx.scratch_root)?;
    let result = ctx.sandbox.execute(&SandboxRequest {
        script: script.to_string(),
        timeout_s: ctx.timeout_s,
        workdir: workdir.path().to_path_buf(),
    })?;
    let png_ok = result.figure_file.as_deref().map(has_png_magic).unwrap_or(false);
    Ok(result.status == RenderStatus::Ok && png_ok)
}

/// Generate, parse and filter records for `tasks` on one rendered chart. Per-task
/// failures are counted in `stats` and skipped; only an unusable sandbox is an error.
pub fn synthesize<R: Rng + ?Sized>(
    record: &ChartRecord,
    tasks: &[TaskKind],
    ctx: &Stage3Context<'_>,
    stats: &mut FilterStats,
    rng: &mut R,
) -> Result<Vec<InstructionRecord>> {
    if !record.is_ok() {
        return Err(Error::contract(format!("chart {} did not render", record.id())));
    }
    let mut out = Vec::new();
    let mut occurrences: BTreeMap<TaskKind, usize> = BTreeMap::new();
    let mut emitted: BTreeMap<TaskKind, usize> = BTreeMap::new();
    for &task in tasks {
        let occurrence = *occurrences.entry(task).and_modify(|n| *n += 1).or_insert(0);
        let tags: Vec<CharacteristicTag> = if task == TaskKind::Qa {
            ctx.vocabulary
                .choose_multiple(rng, ctx.n_pairs.min(ctx.vocabulary.len()))
                .cloned()
                .collect()
        } else {
            Vec::new()
        };
        let mut prompt = build_stage3_prompt(record, task, &tags, &ctx.exemplars, ctx.k, ctx.n_pairs)?;
        if occurrence > 0 {
            prompt.user_text.push_str(&format!(
                "\nThis is request {} for this task on this chart; make it clearly different from the earlier ones.\n",
                occurrence + 1
            ));
        }
        let exchange = match ctx.gateway.complete(&prompt.to_request(&ctx.model_id)) {
            Ok(x) => x,
            Err(e @ (Error::Backend { .. } | Error::CacheMiss { .. })) => {
                log::warn!("chart {} task {task}: {e}", record.id());
                stats.record(REASON_BACKEND);
                continue;
            }
            Err(e) => return Err(e),
        };
        let parsed = match parse_stage3_output(&exchange.response_text, task) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("chart {} task {task}: {e}", record.id());
                stats.record(REASON_FORMAT);
                continue;
            }
        };
        for _ in 0..parsed.dropped {
            stats.record(REASON_QA_PAIR);
        }
        let provenance = Provenance {
            backend: ctx.gateway.kind().name().to_string(),
            prompt_digest: exchange.cache_key.to_string(),
        };
        let fragments = if task == TaskKind::Qa {
            parsed.fragments
        } else {
            parsed.fragments.into_iter().take(1).collect()
        };
        for fragment in fragments {
            let script = match task {
                TaskKind::TextToChart => record.script.clone(),
                _ => fragment.answer.clone(),
            };
            let (human, assistant) = match task {
                TaskKind::ChartExtraction => (
                    fragment.instruction,
                    fence::wrap(LABEL_CSV, &record.seed.table.to_csv()),
                ),
                TaskKind::TextToChart => (
                    format!("{}\n\n{}", fragment.instruction, fence::wrap(LABEL_CSV, &record.seed.table.to_csv())),
                    code_answer(&record.script),
                ),
                TaskKind::ChartToChart | TaskKind::ChartEditing => (fragment.instruction, code_answer(&fragment.answer)),
                _ => (fragment.instruction, fragment.answer),
            };
            if task.produces_code() && !verify_script(&script, ctx)? {
                log::warn!("chart {} task {task}: answer script failed to render", record.id());
                stats.record(REASON_RENDER);
                continue;
            }
            let human = if task.takes_image() {
                format!("{IMAGE_TOKEN}\n{human}")
            } else {
                human
            };
            let n = emitted.entry(task).or_insert(0);
            *n += 1;
            let instruction = InstructionRecord {
                id: format!("{}-{}-{}", record.id(), task, n),
                chart_id: record.id().to_string(),
                image: record.figure_path.clone(),
                task,
                conversations: vec![Turn::human(human), Turn::assistant(assistant)],
                provenance: provenance.clone(),
            };
            instruction.validate()?;
            out.push(instruction);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::eval::{table_similarity, table_to_triples};
    use crate::llm::ScriptQueue;
    use crate::model::{ChartSeed, ChartType, GenerationSpec};
    use crate::sandbox::StubSandbox;

    const SCRIPT: &str = "import matplotlib.pyplot as plt\nplt.bar(['Q1', 'Q2'], [10, 20])\nplt.savefig('figure.png')";

    fn record() -> ChartRecord {
        ChartRecord {
            seed: ChartSeed {
                id: "chart-00001".into(),
                spec: GenerationSpec {
                    theme: "sales".into(),
                    trends: vec![],
                    n_rows: 2,
                    n_cols: 2,
                    chart_type: ChartType::Bar,
                    reference_table: None,
                    rng_seed: 0,
                },
                table: TableData::from_text_rows(&["Quarter", "Sales"], &[&["Q1", "10"], &["Q2", "20"]]).unwrap(),
                data_description: "Quarterly sales.".into(),
                figure_intent: "Green bars.".into(),
                figure_description: "Green bars.".into(),
            },
            script: SCRIPT.into(),
            figure_path: "charts/chart-00001/figure.png".into(),
            render_status: RenderStatus::Ok,
            diagnostic: String::new(),
        }
    }

    fn qa_response(n: usize) -> String {
        (1..=n)
            .map(|i| format!("```question-{i}\nQuestion {i}?\n```\n```answer-{i}\n{i}\n```\n"))
            .collect()
    }

    fn tags(names: &[&str]) -> Vec<CharacteristicTag> {
        names.iter().map(|n| CharacteristicTag::new(*n).unwrap()).collect()
    }

    #[test]
    fn qa_prompt_names_tags() {
        let p = build_stage3_prompt(&record(), TaskKind::Qa, &tags(&["extremum", "trend"]), &[], 0, 5).unwrap();
        assert!(p.user_text.contains("extremum"));
        assert!(p.user_text.contains("trend"));
        assert!(p.user_text.contains("Quarterly sales."));
        assert!(p.user_text.contains("Green bars."));
        assert!(p.user_text.contains("Q2,20"));
    }

    #[test]
    fn editing_prompt_has_script_verbatim() {
        let p = build_stage3_prompt(&record(), TaskKind::ChartEditing, &[], &[], 0, 5).unwrap();
        assert!(p.user_text.contains(SCRIPT));
    }

    #[test]
    fn extraction_prompt_requests_csv() {
        let p = build_stage3_prompt(&record(), TaskKind::ChartExtraction, &[], &builtin_exemplars(), 1, 5).unwrap();
        assert!(p.user_text.contains("re-serialized in CSV format"));
        assert!(p.user_text.contains("```csv"));
    }

    #[test]
    fn code_tasks_demand_fenced_answer() {
        for task in [TaskKind::ChartToChart, TaskKind::TextToChart, TaskKind::ChartEditing] {
            let p = build_stage3_prompt(&record(), task, &[], &[], 0, 5).unwrap();
            assert!(p.user_text.contains("fenced code block"), "{task}");
        }
    }

    #[test]
    fn script_tasks_need_a_script() {
        let mut r = record();
        r.script.clear();
        for task in [TaskKind::ChartToChart, TaskKind::ChartEditing] {
            assert!(matches!(build_stage3_prompt(&r, task, &[], &[], 0, 5), Err(Error::Contract(_))));
        }
        assert!(build_stage3_prompt(&r, TaskKind::ChartToText, &[], &[], 0, 5).is_ok());
        let mut failed = record();
        failed.render_status = RenderStatus::ExecError;
        assert!(build_stage3_prompt(&failed, TaskKind::Qa, &tags(&["trend"]), &[], 0, 5).is_err());
    }

    #[test]
    fn parse_five_qa_pairs() {
        let parsed = parse_stage3_output(&qa_response(5), TaskKind::Qa).unwrap();
        assert_eq!(parsed.fragments.len(), 5);
        assert_eq!(parsed.dropped, 0);
    }

    #[test]
    fn qa_pair_without_answer_is_dropped() {
        let text = format!("{}```question-3\nOrphan?\n```\n", qa_response(2));
        let parsed = parse_stage3_output(&text, TaskKind::Qa).unwrap();
        assert_eq!(parsed.fragments.len(), 2);
        assert_eq!(parsed.dropped, 1);
    }

    #[test]
    fn ragged_extraction_is_format_error() {
        let text = "```instruction\nExtract.\n```\n```csv\nk,a,b\nx,1\n```";
        assert!(matches!(parse_stage3_output(text, TaskKind::ChartExtraction), Err(Error::Format(_))));
    }

    #[test]
    fn chart_to_chart_without_fence_is_format_error() {
        let text = "```instruction\nRedraw it.\n```\nimport matplotlib";
        assert!(matches!(parse_stage3_output(text, TaskKind::ChartToChart), Err(Error::Format(_))));
    }

    #[test]
    fn synthesize_qa_records() {
        let gw = Gateway::scripted(ScriptQueue::new([qa_response(5)]));
        let ctx = Stage3Context::new(&gw, &StubSandbox);
        let mut stats = FilterStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let records = synthesize(&record(), &[TaskKind::Qa], &ctx, &mut stats, &mut rng).unwrap();
        assert_eq!(records.len(), 5);
        assert!(records.iter().all(|r| r.task == TaskKind::Qa));
        assert!(records[0].conversations[0].value.starts_with(IMAGE_TOKEN));
        assert_eq!(records[0].provenance.backend, "scripted");
        assert_eq!(stats.total(), 0);
    }

    #[test]
    fn failing_answer_script_is_filtered() {
        let response = "```instruction\nRedraw.\n```\n```python\nraise ValueError('x')\n```";
        let gw = Gateway::scripted(ScriptQueue::new([response]));
        let ctx = Stage3Context::new(&gw, &StubSandbox);
        let mut stats = FilterStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let records = synthesize(&record(), &[TaskKind::ChartToChart], &ctx, &mut stats, &mut rng).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.get(REASON_RENDER), 1);
    }

    #[test]
    fn ragged_extraction_in_synthesis_increments_counter() {
        let gw = Gateway::scripted(ScriptQueue::new(["```instruction\nExtract.\n```\n```csv\nk,a\nx\n```"]));
        let ctx = Stage3Context::new(&gw, &StubSandbox);
        let mut stats = FilterStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let records = synthesize(&record(), &[TaskKind::ChartExtraction], &ctx, &mut stats, &mut rng).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.get(REASON_FORMAT), 1);
    }

    #[test]
    fn all_tasks_yield_all_kinds() {
        let script = format!("```python\n{SCRIPT}\n```");
        let responses = vec![
            qa_response(5),
            "```instruction\nSummarise.\n```\n```answer\nSales doubled.\n```".to_string(),
            "```instruction\nExtract the table.\n```\n```csv\nQuarter,Sales\nQ1,10\nQ2,20\n```".to_string(),
            "```instruction\nDescribe.\n```\n```answer\nA bar chart of sales.\n```".to_string(),
            format!("```instruction\nRedraw.\n```\n{script}"),
            "```instruction\nDraw a green bar chart.\n```".to_string(),
            format!("```instruction\nMake it red.\n```\n{script}"),
        ];
        let gw = Gateway::scripted(ScriptQueue::new(responses));
        let ctx = Stage3Context::new(&gw, &StubSandbox);
        let mut stats = FilterStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let records = synthesize(&record(), &TaskKind::ALL, &ctx, &mut stats, &mut rng).unwrap();
        assert_eq!(records.len(), 11);
        for task in TaskKind::ALL {
            assert!(records.iter().any(|r| r.task == task), "{task}");
        }
        let t2c = records.iter().find(|r| r.task == TaskKind::TextToChart).unwrap();
        assert!(!t2c.conversations[0].value.starts_with(IMAGE_TOKEN));
        assert!(t2c.conversations[0].value.contains("Q2,20"));
        assert!(t2c.conversations[1].value.contains(SCRIPT));

        let extraction = records.iter().find(|r| r.task == TaskKind::ChartExtraction).unwrap();
        let table = parse_extraction_answer(&extraction.conversations[1].value).unwrap();
        let (p, r, f1) = table_similarity(&table_to_triples(&table), &table_to_triples(&record().seed.table));
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn backend_failure_is_counted_not_fatal() {
        let mut queue = ScriptQueue::default();
        queue.push_failure("rate limited");
        let gw = Gateway::scripted(queue);
        let ctx = Stage3Context::new(&gw, &StubSandbox);
        let mut stats = FilterStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let records = synthesize(&record(), &[TaskKind::ChartToText], &ctx, &mut stats, &mut rng).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.get(REASON_BACKEND), 1);
    }
}
