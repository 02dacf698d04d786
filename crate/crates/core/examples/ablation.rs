// Stage-2 prompt ablation: render the same seeds with and without function
// documentation and in-context examples and compare success rates.
//
// Run with `cargo run --example ablation`. The mock backend writes worse scripts when the
// prompt lacks documentation or examples, so the report has the expected shape.

use chartforge::config::{BackendMode, RunConfig, SandboxMode};
use chartforge::pipeline::{self, RunLog};
use chartforge::stage2::{AblationReport, Stage2PromptVariant};

pub fn run_example() -> chartforge::Result<AblationReport> {
    let work = tempfile::tempdir()?;
    let mut cfg = RunConfig {
        backend: BackendMode::Mock,
        n_seeds: 50,
        seed: 4,
        ..RunConfig::default()
    };
    cfg.stage2.sandbox = SandboxMode::Stub;
    cfg.paths.cache_dir = work.path().join("cache");

    let gateway = pipeline::make_gateway(&cfg)?;
    let sandbox = pipeline::make_sandbox(&cfg);
    let themes = pipeline::theme_pool(&cfg, &gateway)?;
    let seeds = pipeline::generate_seeds(&cfg, &cfg.sampling(), &themes, &gateway, &RunLog::disabled())?.seeds;
    let (warmup, test) = seeds.split_at(20);

    let warm = pipeline::render_seeds(
        warmup,
        &cfg,
        &gateway,
        sandbox.as_ref(),
        &work.path().join("figures"),
        work.path(),
        &RunLog::disabled(),
    )?;
    println!("exemplar pool warmed with {} scripts\n", warm.pool.len());

    let report = pipeline::run_stage2_ablation(test, &Stage2PromptVariant::ALL, &warm.pool, &cfg, &gateway, sandbox.as_ref(), work.path())?;
    print!("{}", report.render_text());
    Ok(report)
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
