//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails. Tolerances and time budgets are the constants below.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chartforge::config::{RunConfig, SandboxMode};
use chartforge::dataset::Dataset;
use chartforge::eval::{
    bleu4, entry_similarity, format_percentage, parse_rubric_scores, relaxed_match, success_rate, table_similarity,
    TableTriples, Triple, TripleValue, DEFAULT_TAU,
};
use chartforge::fence;
use chartforge::llm::{Gateway, ScriptQueue};
use chartforge::model::{
    check_trend, validate_table, ChartSeed, ChartType, FilterStats, GenerationSpec, RenderStatus, TableData, TaskKind,
    TrendSpec, TrendVerifier,
};
use chartforge::pipeline;
use chartforge::sandbox::{has_png_magic, StubSandbox};
use chartforge::stage1::{self, generate_seed, Stage1Options};
use chartforge::stage2::{generate_figure, run_ablation, DocCatalog, ExemplarPool, Stage2Context, Stage2PromptVariant};
use chartforge::Error;

const SIMILARITY_PAIRS: usize = 200;
const SIMILARITY_MAX_ENTRIES: usize = 4;
const SIMILARITY_EPS: f64 = 1e-9;
const SIMILARITY_BUDGET: Duration = Duration::from_secs(10);
const QA_TOLERANCE: f64 = 0.05;
const RUBRIC_EPS: f64 = 1e-9;
const REPLAY_BUDGET: Duration = Duration::from_secs(120);
const REPLAY_SANDBOX_BUDGET: Duration = Duration::from_secs(300);
const VALIDATOR_SERIES: usize = 1000;
const VALIDATOR_BUDGET: Duration = Duration::from_secs(5);

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("table similarity matches exhaustive assignment", similarity_oracle),
        ("relaxed accuracy fixture suite", relaxed_accuracy_suite),
        ("bleu-4 edge cases", bleu_edges),
        ("rubric parsing", rubric_parsing),
        ("end-to-end replay determinism", replay_determinism),
        ("filtering of bad outputs", filtering),
        ("prompt ablation harness", ablation),
        ("table and trend validators", validators),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} ({secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} ({secs:.2}s)");
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------------

/// Best total similarity over every one-to-one partial map from `pred` into `gold`.
fn brute_force_total(pred: &TableTriples, gold: &TableTriples) -> f64 {
    fn go(i: usize, pred: &[Triple], gold: &[Triple], used: &mut Vec<bool>) -> f64 {
        if i == pred.len() {
            return 0.0;
        }
        let mut best = go(i + 1, pred, gold, used);
        for j in 0..gold.len() {
            if !used[j] {
                used[j] = true;
                let s = entry_similarity(&pred[i], &gold[j], DEFAULT_TAU) + go(i + 1, pred, gold, used);
                used[j] = false;
                best = best.max(s);
            }
        }
        best
    }
    go(0, &pred.entries, &gold.entries, &mut vec![false; gold.len()])
}

fn oracle_prf(pred: &TableTriples, gold: &TableTriples) -> (f64, f64, f64) {
    if pred.is_empty() && gold.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if pred.is_empty() || gold.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let total = brute_force_total(pred, gold);
    let p = total / pred.len() as f64;
    let r = total / gold.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn random_triples(rng: &mut ChaCha8Rng, n: usize) -> TableTriples {
    let rows = ["2019", "2020", "2021", "North", "South"];
    let cols = ["Sales", "Revenue", "Share"];
    let words = ["high", "low", "medium", "n/a"];
    let entries = (0..n)
        .map(|_| {
            let mut row_key = rows[rng.gen_range(0..rows.len())].to_string();
            if rng.gen_bool(0.3) {
                row_key.push('x');
            }
            let value = if rng.gen_bool(0.75) {
                TripleValue::Number(rng.gen_range(-50.0..150.0f64).round() / if rng.gen_bool(0.5) { 1.0 } else { 10.0 })
            } else {
                TripleValue::Text(words[rng.gen_range(0..words.len())].into())
            };
            Triple {
                row_key,
                col_key: cols[rng.gen_range(0..cols.len())].into(),
                value,
            }
        })
        .collect();
    TableTriples { entries }
}

fn similarity_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..SIMILARITY_PAIRS {
        let (np, ng) = (rng.gen_range(0..=SIMILARITY_MAX_ENTRIES), rng.gen_range(0..=SIMILARITY_MAX_ENTRIES));
        let pred = random_triples(&mut rng, np);
        let gold = random_triples(&mut rng, ng);
        let got = table_similarity(&pred, &gold);
        let want = oracle_prf(&pred, &gold);
        for (g, w) in [(got.0, want.0), (got.1, want.1), (got.2, want.2)] {
            worst = worst.max((g - w).abs());
            ensure!((g - w).abs() <= SIMILARITY_EPS, "pair {i}: got {got:?}, oracle {want:?}");
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < SIMILARITY_BUDGET, "took {elapsed:?}");
    Ok(format!("{SIMILARITY_PAIRS} pairs, max |diff| {worst:.1e}"))
}

// ---------------------------------------------------------------------------------

fn relaxed_accuracy_suite() -> Check {
    let cases: [(&str, &str, bool); 20] = [
        ("26", "25", true),
        ("26.25", "25", true),
        ("26.5", "25", false),
        ("96", "100", true),
        ("95", "100", true),
        ("94", "100", false),
        ("104", "100", true),
        ("105", "100", true),
        ("106", "100", false),
        ("45%", "45", true),
        ("45 %", "45%", true),
        ("47.5%", "50%", true),
        ("1,200", "1200", true),
        ("1,250", "1,200", true),
        ("1,300", "1,200", false),
        ("Asia", "asia", true),
        (" Europe ", "Europe", true),
        ("Europe", "Asia", false),
        ("0", "0", true),
        ("1", "0", false),
    ];
    let wrong: Vec<String> = cases
        .iter()
        .filter(|(p, g, want)| relaxed_match(p, g, QA_TOLERANCE) != *want)
        .map(|(p, g, want)| format!("({p:?}, {g:?}) expected {want}"))
        .collect();
    ensure!(wrong.is_empty(), "{}", wrong.join("; "));
    Ok(format!("{}/{} cases agree at tolerance {QA_TOLERANCE}", cases.len(), cases.len()))
}

// ---------------------------------------------------------------------------------

fn bleu_edges() -> Check {
    let identical = bleu4("the red bars rise every year", &["the red bars rise every year"]);
    ensure!(identical == 1.0, "identical pair scored {identical}");
    let disjoint = bleu4("apples oranges pears plums", &["cars trucks buses trains"]);
    ensure!(disjoint == 0.0, "disjoint pair scored {disjoint}");
    let short = bleu4("the red bars", &["the red bars rise every year"]);
    ensure!(short == 0.0, "3-token candidate scored {short}");
    Ok(format!("identical {identical}, disjoint {disjoint}, 3 tokens {short}"))
}

// ---------------------------------------------------------------------------------

fn rubric_parsing() -> Check {
    let canned: [(TaskKind, &str, f64); 6] = [
        (
            TaskKind::ChartToChart,
            "The bars match but one colour differs.\nCRITERION: data SCORE: 4\nCRITERION: axes SCORE: 5\nCRITERION: colors SCORE: 3\nCRITERION: chart types SCORE: 5\nCRITERION: titles SCORE: 4\n",
            84.0,
        ),
        (
            TaskKind::ChartToChart,
            "**CRITERION: Data SCORE: 5**\nCRITERION: axes SCORE: 5\nCRITERION: colors SCORE: 5\n- CRITERION: chart types SCORE: 5\nCRITERION: titles SCORE: 5",
            100.0,
        ),
        (
            TaskKind::TextToChart,
            "Rendered chart covers most rows.\nCRITERION: visual similarity SCORE: 3\nCRITERION: completeness SCORE: 4\nCRITERION: accuracy SCORE: 5\nCRITERION: aesthetics SCORE: 2\n",
            70.0,
        ),
        (
            TaskKind::ChartEditing,
            "CRITERION: data accuracy SCORE: 5\nCRITERION: completeness SCORE: 4\nCRITERION: aesthetics SCORE: 4\nCRITERION: instruction following SCORE: 3\n",
            80.0,
        ),
        (
            TaskKind::DetailedDescription,
            "Misses the legend.\nCRITERION: data characteristics SCORE: 1\nCRITERION: visual attributes SCORE: 2\nCRITERION: accuracy SCORE: 3\nCRITERION: completeness SCORE: 4\n",
            50.0,
        ),
        (
            TaskKind::ChartToText,
            "CRITERION: accuracy SCORE: 5\nCRITERION: completeness SCORE: 5\nCRITERION: relevance SCORE: 4\nCRITERION: fluency SCORE: 4\n",
            90.0,
        ),
    ];
    let mut seen = Vec::new();
    for (task, text, want) in canned {
        let got = parse_rubric_scores(text, task).map_err(|e| format!("{task}: {e}"))?.normalized;
        ensure!((got - want).abs() <= RUBRIC_EPS, "{task}: got {got}, expected {want}");
        seen.push(format!("{task} {got:.1}"));
    }
    let missing = "CRITERION: data SCORE: 4\nCRITERION: axes SCORE: 5\nCRITERION: chart types SCORE: 5\nCRITERION: titles SCORE: 4\n";
    match parse_rubric_scores(missing, TaskKind::ChartToChart) {
        Err(Error::ScoreParse { message, .. }) if message.contains("colors") => {}
        other => return Err(format!("missing `colors` line gave {other:?}")),
    }
    Ok(format!("{}; missing line rejected", seen.join(", ")))
}

// ---------------------------------------------------------------------------------

fn have_matplotlib() -> bool {
    Command::new("python3")
        .args(["-c", "import matplotlib"])
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn replay_determinism() -> Check {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::load(&root.join("tests/fixtures/replay30/config.toml")).map_err(|e| e.to_string())?;

    let mut digests = Vec::new();
    let mut stub = None;
    for name in ["first", "second"] {
        cfg.paths.out_dir = work.path().join(name);
        let started = Instant::now();
        let summary = pipeline::build(&cfg, false).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        ensure!(elapsed < REPLAY_BUDGET, "{name} stubbed build took {elapsed:?}");
        ensure!(summary.stats.chart_types.len() == 10, "{} chart types", summary.stats.chart_types.len());
        ensure!(summary.stats.tasks.len() == 7, "{} task kinds", summary.stats.tasks.len());
        digests.push(summary.manifest.digest.clone());
        stub = Some(summary);
    }
    ensure!(digests[0] == digests[1], "digests differ: {} vs {}", digests[0], digests[1]);
    let stub = stub.unwrap();
    let mut detail = format!(
        "digest {}.. stable, {} charts, {} records, 10 types, 7 tasks",
        &digests[0][..12],
        stub.stats.total_charts,
        stub.stats.total_records
    );

    if !have_matplotlib() {
        detail.push_str("; sandboxed run skipped (no python3 with matplotlib)");
        return Ok(detail);
    }
    cfg.stage2.sandbox = SandboxMode::Shim;
    cfg.paths.sandbox_program = Some(root.join("tests/fixtures/fake_runner.py"));
    cfg.paths.out_dir = work.path().join("sandboxed");
    let started = Instant::now();
    let real = pipeline::build(&cfg, false).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure!(elapsed < REPLAY_SANDBOX_BUDGET, "sandboxed build took {elapsed:?}");
    ensure!(real.manifest.counts == stub.manifest.counts, "sandboxed counts differ from stubbed counts");
    let ds = Dataset::load(&cfg.paths.out_dir).map_err(|e| e.to_string())?;
    ds.audit().map_err(|e| e.to_string())?;
    for chart in &ds.charts {
        let figure = cfg.paths.out_dir.join(&chart.figure_path);
        let size = std::fs::metadata(&figure).map(|m| m.len()).unwrap_or(0);
        ensure!(has_png_magic(&figure) && size > 1000, "{} has no real PNG", chart.id());
    }
    detail.push_str(&format!("; sandboxed run {:.0}s with identical counts", elapsed.as_secs_f64()));
    Ok(detail)
}

// ---------------------------------------------------------------------------------

fn pie_spec() -> GenerationSpec {
    GenerationSpec {
        theme: "browser market share".into(),
        trends: vec![],
        n_rows: 3,
        n_cols: 2,
        chart_type: ChartType::Pie,
        reference_table: None,
        rng_seed: 1,
    }
}

fn pie_seed(id: &str) -> ChartSeed {
    ChartSeed {
        id: id.into(),
        spec: pie_spec(),
        table: TableData::from_text_rows(&["Browser", "Share"], &[&["Chrome", "65"], &["Safari", "20"], &["Other", "15"]])
            .unwrap(),
        data_description: "Browser share in percent.".into(),
        figure_intent: "A pie with three slices.".into(),
        figure_description: String::new(),
    }
}

fn stage1_text(csv: &str, with_figure: bool) -> String {
    let mut out = format!(
        "{}\n\n{}\n",
        fence::wrap(stage1::SECTION_CSV, csv),
        fence::wrap(stage1::SECTION_DATA, "Browser share in percent.")
    );
    if with_figure {
        out.push_str(&format!("\n{}\n", fence::wrap(stage1::SECTION_FIGURE, "A pie with three slices.")));
    }
    out
}

fn fenced_script(body: &str) -> String {
    format!("Here is the script.\n\n```python\n{body}\n```\n")
}

fn filtering() -> Check {
    const HEAD: &str = "import matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\n";
    let options = Stage1Options::default();
    let mut counters = FilterStats::default();
    let mut survivors: Vec<ChartSeed> = Vec::new();

    let stage1_bad = [
        stage1_text("Browser,Share\nChrome,65,extra\nSafari,20\nOther,15", true),
        stage1_text("Browser,Share\nChrome,65\nSafari,20\nOther,15", false),
        stage1_text("Browser,Share\nChrome,70\nSafari,25\nOther,15", true),
    ];
    for (i, text) in stage1_bad.iter().enumerate() {
        let gateway = Gateway::scripted(ScriptQueue::new(vec![text.clone(); options.max_attempts]));
        match generate_seed(&format!("bad-{i}"), &pie_spec(), &gateway, &options) {
            Ok(outcome) => survivors.push(outcome.seed),
            Err(e) => counters.record(stage1::failure_reason(&e)),
        }
    }
    ensure!(survivors.is_empty(), "{} bad Stage 1 outputs survived", survivors.len());

    let stage2_bad = [
        format!("{HEAD}plt.pie([65, 20, 15])\nplt.savefig('figure.png')\n"),
        fenced_script(&format!("{HEAD}plt.pie([65, 20, 15]\nplt.savefig('figure.png')")),
        fenced_script(&format!("{HEAD}raise RuntimeError('bad data')\nplt.savefig('figure.png')")),
        fenced_script(&format!("{HEAD}while True:\n    pass\nplt.savefig('figure.png')")),
        fenced_script(&format!("{HEAD}plt.pie([65, 20, 15])\nplt.show()")),
    ];
    let control = fenced_script(&format!("{HEAD}plt.pie([65, 20, 15])\nplt.savefig('figure.png')"));
    let docs = DocCatalog::builtin();
    let pool = ExemplarPool::default();
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rendered_from_bad = 0;
    let mut control_rendered = false;
    for (i, text) in stage2_bad.iter().chain(std::iter::once(&control)).enumerate() {
        let gateway = Gateway::scripted(ScriptQueue::new([text.clone()]));
        let mut ctx = Stage2Context::new(&gateway, &StubSandbox, &docs);
        ctx.render.scratch_root = scratch.path().to_path_buf();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let outcome = generate_figure(
            &pie_seed(&format!("chart-{i}")),
            &pool,
            Stage2PromptVariant::Full,
            &ctx,
            &scratch.path().join("dataset"),
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        match (i < stage2_bad.len(), outcome.is_rendered()) {
            (true, true) => rendered_from_bad += 1,
            (true, false) => counters.record(outcome.reason()),
            (false, rendered) => control_rendered = rendered,
        }
    }
    ensure!(rendered_from_bad == 0, "{rendered_from_bad} bad Stage 2 outputs rendered");
    ensure!(control_rendered, "the well-formed control script was filtered");
    ensure!(counters.total() == 8, "counters sum to {}: {counters:?}", counters.total());
    ensure!(counters.iter().count() >= 7, "expected distinct reasons, got {counters:?}");

    let mut statuses = vec![RenderStatus::Ok; 17];
    statuses.extend([RenderStatus::ExecError, RenderStatus::Timeout, RenderStatus::NoFigure]);
    let rate = success_rate(&statuses).map_err(|e| e.to_string())?;
    ensure!(rate == 85.0, "success rate {rate}");
    ensure!(format_percentage(rate) == "85.00", "formatted as {}", format_percentage(rate));

    let reasons: Vec<String> = counters.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Ok(format!("0 records from 8 bad outputs ({}); 17/20 ok -> {}%", reasons.join(", "), format_percentage(rate)))
}

// ---------------------------------------------------------------------------------

fn ablation() -> Check {
    const SEEDS: usize = 10;
    // (variant, rendered seeds, expected rate, expected label)
    let plan = [
        (Stage2PromptVariant::Full, 9, 90.0, "Original"),
        (Stage2PromptVariant::NoIcl, 7, 70.0, "w/o In-context"),
        (Stage2PromptVariant::NoDoc, 6, 60.0, "w/o Documentation"),
        (Stage2PromptVariant::NoBoth, 4, 40.0, "w/o Both"),
    ];
    let good = fenced_script("import matplotlib.pyplot as plt\nplt.pie([65, 20, 15])\nplt.savefig('figure.png')");
    let failures = [
        "Sorry, I cannot draw that.".to_string(),
        fenced_script("import matplotlib.pyplot as plt\nplt.pie([65, 20, 15]"),
        fenced_script("import matplotlib.pyplot as plt\nplt.pie([65, 20, 15])\nplt.show()"),
    ];
    let mut queue = ScriptQueue::default();
    for (_, ok, _, _) in plan {
        for s in 0..SEEDS {
            if s < ok {
                queue.push(good.clone());
            } else {
                queue.push(failures[s % failures.len()].clone());
            }
        }
    }
    let gateway = Gateway::scripted(queue);
    let docs = DocCatalog::builtin();
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut ctx = Stage2Context::new(&gateway, &StubSandbox, &docs);
    ctx.render.scratch_root = scratch.path().to_path_buf();
    let seeds: Vec<ChartSeed> = (0..SEEDS).map(|i| pie_seed(&format!("chart-{i}"))).collect();
    let variants: Vec<Stage2PromptVariant> = plan.iter().map(|p| p.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let report = run_ablation(&seeds, &variants, &ExemplarPool::default(), &ctx, &mut rng).map_err(|e| e.to_string())?;

    ensure!(report.rows.len() == 4, "{} rows", report.rows.len());
    for (row, (variant, ok, rate, label)) in report.rows.iter().zip(plan) {
        ensure!(row.variant == variant && row.label == label, "row {:?} labelled {:?}", row.variant, row.label);
        ensure!(row.attempts == SEEDS && row.successes == ok, "{label}: {}/{}", row.successes, row.attempts);
        ensure!(row.success_rate == rate, "{label}: rate {} expected {rate}", row.success_rate);
        ensure!(row.failures.total() == SEEDS - ok, "{label}: failure counters {:?}", row.failures);
    }
    let rows: Vec<String> = report.rows.iter().map(|r| format!("{} {}%", r.label, r.success_rate)).collect();
    Ok(rows.join(", "))
}

// ---------------------------------------------------------------------------------

fn pie_suite(rng: &mut ChaCha8Rng) -> std::result::Result<usize, String> {
    let mut accepted = 0;
    for i in 0..VALIDATOR_SERIES {
        let n = rng.gen_range(2..8);
        // Values in hundredths, so the oracle sums exactly.
        let mut cents: Vec<i64> = (0..n).map(|_| rng.gen_range(100..4000)).collect();
        if i % 2 == 0 {
            let target = 10_000 + rng.gen_range(-250..=250);
            let sum: i64 = cents[..n - 1].iter().sum();
            cents[n - 1] = target - sum;
        }
        let texts: Vec<String> = cents
            .iter()
            .map(|c| format!("{}{}.{:02}", if *c < 0 { "-" } else { "" }, c.abs() / 100, c.abs() % 100))
            .collect();
        let keys: Vec<String> = (0..n).map(|k| format!("Slice {k}")).collect();
        let rows: Vec<[&str; 2]> = keys.iter().zip(&texts).map(|(k, t)| [k.as_str(), t.as_str()]).collect();
        let rows: Vec<&[&str]> = rows.iter().map(|r| &r[..]).collect();
        let table = TableData::from_text_rows(&["Slice", "Percent"], &rows).map_err(|e| e.to_string())?;
        let expected = (cents.iter().sum::<i64>() - 10_000).abs() <= 100;
        let got = validate_table(&table, ChartType::Pie).is_ok();
        ensure!(got == expected, "pie {texts:?}: validator {got}, oracle {expected}");
        accepted += usize::from(got);
    }
    Ok(accepted)
}

fn ohlc_suite(rng: &mut ChaCha8Rng) -> std::result::Result<usize, String> {
    let orders: [[&str; 4]; 3] = [["Open", "High", "Low", "Close"], ["High", "Low", "Open", "Close"], ["Close", "Open", "Low", "High"]];
    let mut accepted = 0;
    for i in 0..VALIDATOR_SERIES {
        let n = rng.gen_range(1..6);
        let mut rows = Vec::new();
        let mut expected = true;
        for _ in 0..n {
            let (o, c): (i64, i64) = (rng.gen_range(50..150), rng.gen_range(50..150));
            let mut h = o.max(c) + rng.gen_range(0..10);
            let mut l = o.min(c) - rng.gen_range(0..10);
            match rng.gen_range(0..6) {
                0 => h = o.max(c) - rng.gen_range(1..5),
                1 => l = o.min(c) + rng.gen_range(1..5),
                _ => {}
            }
            expected &= h >= o.max(c) && l <= o.min(c);
            rows.push(BTreeMap::from([("Open", o), ("High", h), ("Low", l), ("Close", c)]));
        }
        let order = orders[i % orders.len()];
        let headers: Vec<&str> = std::iter::once("Day").chain(order).collect();
        let texts: Vec<Vec<String>> = rows
            .iter()
            .enumerate()
            .map(|(d, r)| std::iter::once(format!("Day {d}")).chain(order.iter().map(|k| r[k].to_string())).collect())
            .collect();
        let refs: Vec<Vec<&str>> = texts.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let refs: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        let table = TableData::from_text_rows(&headers, &refs).map_err(|e| e.to_string())?;
        let got = validate_table(&table, ChartType::Candlestick).is_ok();
        ensure!(got == expected, "candlestick {texts:?}: validator {got}, oracle {expected}");
        accepted += usize::from(got);
    }
    Ok(accepted)
}

/// A series built to have (or lack) one shape, with the verdict each verifier must give.
fn shaped_series(rng: &mut ChaCha8Rng, kind: usize) -> (Vec<f64>, Vec<(TrendVerifier, bool)>) {
    use TrendVerifier::*;
    let n = rng.gen_range(5..15);
    match kind {
        0 => {
            let mut v = rng.gen_range(-100.0..100.0);
            let s = (0..n)
                .map(|_| {
                    v += rng.gen_range(1.0..10.0);
                    v
                })
                .collect();
            (s, vec![(MonotoneUp, true), (MonotoneDown, false), (Oscillating, false)])
        }
        1 => {
            let mut s: Vec<f64> = (0..n).map(|i| i as f64 * rng.gen_range(1.0..3.0)).collect();
            s.sort_by(f64::total_cmp);
            let at = rng.gen_range(1..n);
            let range = s[n - 1] - s[0];
            s[at] = s[at - 1] - (0.5 + rng.gen::<f64>()) * range.max(1.0);
            (s, vec![(MonotoneUp, false)])
        }
        2 | 3 => {
            let mut s: Vec<f64> = (0..n).map(|_| 100.0 + rng.gen_range(-1.0..1.0)).collect();
            let at = rng.gen_range(1..n - 1);
            let height = rng.gen_range(50.0..100.0);
            let spike = kind == 2;
            s[at] = if spike { 100.0 + height } else { 100.0 - height };
            (s, vec![(Spike, spike), (Dip, !spike), (MonotoneUp, false), (MonotoneDown, false)])
        }
        4 => {
            let m = rng.gen_range(10.0..1000.0);
            let s = (0..n).map(|_| m * (1.0 + rng.gen_range(-0.09..0.09))).collect();
            (s, vec![(Flat, true)])
        }
        5 => {
            let m = rng.gen_range(10.0..1000.0);
            let mut s: Vec<f64> = (0..n).map(|_| m * (1.0 + rng.gen_range(-0.09..0.09))).collect();
            s[rng.gen_range(0..n)] = m * 1.5;
            (s, vec![(Flat, false)])
        }
        _ => {
            let base = rng.gen_range(-50.0..50.0);
            let s = (0..n)
                .map(|i| base + if i % 2 == 0 { 1.0 } else { -1.0 } * rng.gen_range(5.0..10.0))
                .collect();
            (s, vec![(Oscillating, true), (MonotoneUp, false), (MonotoneDown, false)])
        }
    }
}

fn builtin_spec(verifier: TrendVerifier) -> TrendSpec {
    TrendSpec::builtin().into_iter().find(|t| t.verifier == verifier).unwrap()
}

fn trend_suite(rng: &mut ChaCha8Rng) -> std::result::Result<usize, String> {
    let all = [
        TrendVerifier::MonotoneUp,
        TrendVerifier::MonotoneDown,
        TrendVerifier::Spike,
        TrendVerifier::Dip,
        TrendVerifier::Flat,
        TrendVerifier::Oscillating,
    ];
    let mut verdicts = 0;
    for i in 0..VALIDATOR_SERIES {
        let (series, expectations) = shaped_series(rng, i % 7);
        let check = |s: &[f64], v: TrendVerifier| check_trend(s, &builtin_spec(v)).map_err(|e| e.to_string());
        for (verifier, want) in expectations {
            let got = check(&series, verifier)?;
            ensure!(got == want, "{verifier:?} on {series:?}: got {got}, expected {want}");
            verdicts += 1;
        }
        let reversed: Vec<f64> = series.iter().rev().copied().collect();
        let up = TrendSpec::new("up", TrendVerifier::MonotoneUp, 0.05).unwrap();
        let down = TrendSpec::new("down", TrendVerifier::MonotoneDown, 0.05).unwrap();
        ensure!(
            check_trend(&series, &up).unwrap() == check_trend(&reversed, &down).unwrap(),
            "up/down reversal asymmetry on {series:?}"
        );
        for v in all.into_iter().filter(|v| !matches!(v, TrendVerifier::MonotoneUp | TrendVerifier::MonotoneDown)) {
            ensure!(check(&series, v)? == check(&reversed, v)?, "{v:?} changes under reversal on {series:?}");
        }
    }
    Ok(verdicts)
}

fn validators() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let pies = pie_suite(&mut rng)?;
    let candles = ohlc_suite(&mut rng)?;
    let verdicts = trend_suite(&mut rng)?;
    let elapsed = started.elapsed();
    ensure!(elapsed < VALIDATOR_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{n} pie tables ({pies} valid), {n} candlestick tables ({candles} valid), {n} trend series ({verdicts} verdicts, reversal symmetric)",
        n = VALIDATOR_SERIES
    ))
}
