// Record a replay cache with the offline mock backend and check that it replays to the
// same dataset.
//
// `cargo run --example record_fixture_cache` records into a temporary directory;
// `cargo run --example record_fixture_cache -- --write` refreshes the shipped fixture
// under `tests/fixtures/replay30/cache`.

use std::fs;
use std::path::{Path, PathBuf};

use chartforge::config::{BackendMode, RunConfig};
use chartforge::llm::ReplayCache;
use chartforge::pipeline;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay30")
}

/// Record into `cache_dir`; returns (cached exchanges, manifest digest of the replayed build).
pub fn record(cache_dir: &Path) -> chartforge::Result<(usize, String)> {
    let work = tempfile::tempdir()?;
    let mut cfg = RunConfig::load(&fixture_dir().join("config.toml"))?;
    cfg.paths.cache_dir = cache_dir.to_path_buf();
    cfg.paths.out_dir = work.path().join("recorded");
    cfg.backend = BackendMode::Mock;
    let recorded = pipeline::build(&cfg, false)?;

    cfg.backend = BackendMode::Replay;
    cfg.paths.out_dir = work.path().join("replayed");
    let replayed = pipeline::build(&cfg, false)?;
    assert_eq!(recorded.manifest.counts, replayed.manifest.counts);

    let n = ReplayCache::new(cache_dir).len()?;
    println!(
        "{n} exchanges in {}; {} records; replay digest {}",
        cache_dir.display(),
        replayed.manifest.counts.records_total,
        replayed.manifest.digest
    );
    Ok((n, replayed.manifest.digest))
}

pub fn run_example() -> chartforge::Result<(usize, String)> {
    let dir = tempfile::tempdir()?;
    record(&dir.path().join("cache"))
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    if std::env::args().any(|a| a == "--write") {
        let cache = fixture_dir().join("cache");
        if cache.exists() {
            fs::remove_dir_all(&cache)?;
        }
        record(&cache).map(|_| ())
    } else {
        run_example().map(|_| ())
    }
}
