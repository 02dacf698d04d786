//! The `chartforge` binary end to end.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_chartforge");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay30")
}

/// A listener that counts connection attempts, standing in for the LLM endpoint.
struct Tripwire(TcpListener);

impl Tripwire {
    fn new() -> Self {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.set_nonblocking(true).unwrap();
        Tripwire(l)
    }

    fn url(&self) -> String {
        format!("http://{}/v1", self.0.local_addr().unwrap())
    }

    fn contacted(&self) -> bool {
        self.0.accept().is_ok()
    }
}

fn run(args: &[&str], wire: &Tripwire) -> Output {
    Command::new(BIN)
        .args(args)
        .env("CHARTFORGE_LLM_BASE_URL", wire.url())
        .env("CHARTFORGE_LLM_API_KEY", "test-key")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_works_everywhere_without_backend_contact() {
    let wire = Tripwire::new();
    let commands: &[&[&str]] = &[
        &[],
        &["generate"],
        &["render"],
        &["instruct"],
        &["build"],
        &["stats"],
        &["split"],
        &["eval"],
        &["eval", "qa"],
        &["eval", "bleu"],
        &["eval", "extraction"],
        &["eval", "rubric"],
        &["ablate"],
        &["ablate", "stage2"],
        &["themes"],
        &["themes", "bootstrap"],
        &["config"],
    ];
    for cmd in commands {
        let mut args = cmd.to_vec();
        args.push("--help");
        let out = run(&args, &wire);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        assert!(stdout(&out).contains("Usage"), "{args:?}");
    }
    assert!(!wire.contacted());
}

#[test]
fn replay_build_is_deterministic_and_offline() {
    let wire = Tripwire::new();
    let dir = tempfile::tempdir().unwrap();
    let config = fixture().join("config.toml");
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(
            &["build", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--format", "json"],
            &wire,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        digests.push(summary["manifest"]["digest"].as_str().unwrap().to_string());
        assert_eq!(summary["stats"]["tasks"].as_array().unwrap().len(), 7);
        assert_eq!(summary["stats"]["chart_types"].as_array().unwrap().len(), 10);
    }
    assert_eq!(digests[0], digests[1]);
    assert!(!wire.contacted());

    let again = run(
        &["build", "--config", config.to_str().unwrap(), "--out", dir.path().join("a").to_str().unwrap()],
        &wire,
    );
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));
    let forced = run(
        &["build", "--config", config.to_str().unwrap(), "--out", dir.path().join("a").to_str().unwrap(), "--force"],
        &wire,
    );
    assert!(forced.status.success(), "{}", stderr(&forced));

    let stats = run(&["stats", dir.path().join("a").to_str().unwrap(), "--format", "json"], &wire);
    let stats: serde_json::Value = serde_json::from_str(&stdout(&stats)).unwrap();
    let total: f64 = stats["tasks"].as_array().unwrap().iter().map(|s| s["percent"].as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() <= 0.1);
    let text = run(&["stats", dir.path().join("a").to_str().unwrap()], &wire);
    assert!(stdout(&text).contains("chart_extraction"));
}

#[test]
fn all_chart_types_disabled_fails_before_backend_contact() {
    let wire = Tripwire::new();
    let dir = tempfile::tempdir().unwrap();
    let weights: String = [
        "bar", "line", "pie", "funnel", "gantt", "heatmap", "scatter", "box", "candlestick", "area",
    ]
    .iter()
    .map(|t| format!("{t} = 0.0\n"))
    .collect();
    let config = dir.path().join("c.toml");
    fs::write(&config, format!("backend = \"live\"\n[stage1.chart_weights]\n{weights}")).unwrap();
    let out = run(&["build", "--config", config.to_str().unwrap()], &wire);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("disabled"), "{}", stderr(&out));
    assert!(!wire.contacted());
}

#[test]
fn staged_commands_chain() {
    let wire = Tripwire::new();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let common = ["--backend", "mock", "--cache"];
    let cache = p("cache");

    let mut args = vec!["generate", "--n", "5", "--seed", "9", "--chart-types", "pie,line", "--out"];
    let seeds = p("seeds.jsonl");
    args.push(&seeds);
    args.extend(common);
    args.push(&cache);
    let out = run(&args, &wire);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = fs::read_to_string(&seeds).unwrap();
    assert_eq!(lines.lines().count(), 5);
    assert!(lines.lines().all(|l| l.contains("\"pie\"") || l.contains("\"line\"")));

    let charts = p("charts");
    let mut args = vec!["render", "--in", &seeds, "--out", &charts, "--icl", "1", "--sandbox", "stub"];
    args.extend(common);
    args.push(&cache);
    let out = run(&args, &wire);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("rendered"));
    let chart_dirs = fs::read_dir(&charts).unwrap().filter(|e| e.as_ref().unwrap().path().join("figure.png").exists()).count();
    assert!(chart_dirs >= 1);

    let records = p("records.jsonl");
    let mut args = vec!["instruct", "--in", &charts, "--tasks", "qa,chart_extraction", "--out", &records, "--sandbox", "stub"];
    args.extend(common);
    args.push(&cache);
    let out = run(&args, &wire);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), chart_dirs * 6);
    assert!(!wire.contacted());
}

#[test]
fn eval_commands_report_text_and_json() {
    let wire = Tripwire::new();
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    let gold = dir.path().join("gold.jsonl");
    fs::write(&pred, "{\"id\":\"1\",\"predicted\":\"26\"}\n{\"id\":\"2\",\"predicted\":\"Asia\"}\n").unwrap();
    fs::write(&gold, "{\"id\":\"1\",\"gold\":\"25\"}\n{\"id\":\"2\",\"gold\":\"Europe\"}\n").unwrap();
    let report = dir.path().join("qa.json");
    let out = run(
        &["eval", "qa", "--pred", pred.to_str().unwrap(), "--gold", gold.to_str().unwrap(), "--tol", "0.05", "--report", report.to_str().unwrap()],
        &wire,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("relaxed_accuracy"));
    assert!(stdout(&out).contains("50.00"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json[0]["value"], 50.0);

    let (pt, gt) = (dir.path().join("pt"), dir.path().join("gt"));
    fs::create_dir_all(&pt).unwrap();
    fs::create_dir_all(&gt).unwrap();
    fs::write(gt.join("c1.csv"), "Quarter,Sales\nQ1,100\n").unwrap();
    fs::write(pt.join("c1.csv"), "Quarter,Sales\nQ1,90\n").unwrap();
    let out = run(
        &["eval", "extraction", "--pred", pt.to_str().unwrap(), "--gold", gt.to_str().unwrap(), "--format", "json"],
        &wire,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((json["f1"].as_f64().unwrap() - 0.9).abs() < 1e-9);

    let runs = dir.path().join("runs");
    fs::create_dir_all(&runs).unwrap();
    fs::write(
        runs.join("r1.json"),
        serde_json::json!({"gold_script": "plt.bar([1], [2])", "predicted_script": "plt.bar([1], [2])"}).to_string(),
    )
    .unwrap();
    let out = run(
        &["eval", "rubric", "--task", "chart_to_chart", "--pred", runs.to_str().unwrap(), "--backend", "mock", "--cache", dir.path().join("c").to_str().unwrap()],
        &wire,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("rubric"));

    let missing = run(
        &["eval", "rubric", "--task", "chart_to_chart", "--pred", runs.to_str().unwrap(), "--backend", "replay", "--cache", dir.path().join("none").to_str().unwrap()],
        &wire,
    );
    assert!(!missing.status.success());
    assert!(!wire.contacted());
}

#[test]
fn ablate_reports_four_variants() {
    let wire = Tripwire::new();
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["ablate", "stage2", "--n", "6", "--warmup", "4", "--backend", "mock", "--sandbox", "stub", "--cache", dir.path().to_str().unwrap(), "--format", "json"],
        &wire,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let labels: Vec<&str> = json["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Original", "w/o In-context", "w/o Documentation", "w/o Both"]);
}

#[test]
fn split_partitions_by_chart() {
    let wire = Tripwire::new();
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let out = run(
        &["build", "--config", fixture().join("config.toml").to_str().unwrap(), "--out", ds.to_str().unwrap()],
        &wire,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&["split", ds.to_str().unwrap(), "--train", "0.8", "--test", "0.2", "--seed", "7"], &wire);
    assert!(out.status.success(), "{}", stderr(&out));
    let bad = run(&["split", ds.to_str().unwrap(), "--train", "0.5", "--test", "0.6"], &wire);
    assert!(!bad.status.success());
}
