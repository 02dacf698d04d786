// Build a complete dataset from the shipped replay cache, then audit, summarize and split it.
//
// Run with `cargo run --example end_to_end_build`. Works offline: every LLM answer comes
// from `tests/fixtures/replay30/cache`.

use std::path::Path;

use chartforge::config::RunConfig;
use chartforge::dataset::{self, Dataset};
use chartforge::pipeline::{self, BuildSummary};

pub fn fixture_config() -> chartforge::Result<RunConfig> {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay30/config.toml"))
}

pub fn run_example() -> chartforge::Result<BuildSummary> {
    let work = tempfile::tempdir()?;
    let mut cfg = fixture_config()?;
    cfg.paths.out_dir = work.path().join("dataset");

    let summary = pipeline::build(&cfg, false)?;
    print!("{}", summary.render_text());

    let ds = Dataset::load(&cfg.paths.out_dir)?;
    ds.audit()?;
    let split = dataset::split(&cfg.paths.out_dir, (0.8, 0.2), 7)?;
    println!(
        "\nsplit: {} train charts ({} records), {} test charts ({} records)",
        split.train_charts.len(),
        split.train_records,
        split.test_charts.len(),
        split.test_records
    );
    Ok(summary)
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
