// Stage 2: prompt for a plotting script, execute it in a sandbox and grow the exemplar pool.
//
// Run with `cargo run --example stage2_render` (in-process stub sandbox) or
// `cargo run --example stage2_render -- /path/to/sandbox-runner` to execute the
// scripts for real.

use std::path::Path;

use chartforge::llm::Gateway;
use chartforge::mock::MockResponder;
use chartforge::model::{ChartSeed, ChartType};
use chartforge::sandbox::{has_png_magic, Sandbox, ShimSandbox, StubSandbox};
use chartforge::stage1::{self, SamplingConfig, Stage1Options, ThemePool};
use chartforge::stage2::{self, DocCatalog, ExemplarPool, FigureOutcome, Stage2Context, Stage2PromptVariant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seeds(gateway: &Gateway, n: usize) -> chartforge::Result<Vec<ChartSeed>> {
    let sampling = SamplingConfig {
        chart_weights: [(ChartType::Line, 1.0), (ChartType::Pie, 1.0)].into_iter().collect(),
        ..SamplingConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..n)
        .map(|i| {
            let spec = stage1::sample_spec(&sampling, &ThemePool::builtin(), &mut rng)?;
            Ok(stage1::generate_seed(&format!("chart-{i:05}"), &spec, gateway, &Stage1Options::default())?.seed)
        })
        .collect()
}

/// Returns (rendered, attempted).
pub fn run_with(sandbox: &dyn Sandbox) -> chartforge::Result<(usize, usize)> {
    let gateway = Gateway::scripted(MockResponder);
    let docs = DocCatalog::builtin();
    let work = tempfile::tempdir()?;
    let mut ctx = Stage2Context::new(&gateway, sandbox, &docs);
    ctx.render.scratch_root = work.path().join("scratch");
    let dataset_root = work.path().join("dataset");

    let seeds = seeds(&gateway, 6)?;
    let mut pool = ExemplarPool::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rendered = 0;
    for seed in &seeds {
        let prompt = stage2::build_stage2_prompt(seed, &docs, &pool, ctx.k, Stage2PromptVariant::Full, &mut rng);
        println!(
            "{} ({}): prompt with {} exemplar(s), docs {}",
            seed.id, seed.spec.chart_type, prompt.exemplars_used, prompt.docs_included
        );
        match stage2::generate_figure(seed, &pool, Stage2PromptVariant::Full, &ctx, &dataset_root, &mut rng)? {
            FigureOutcome::Rendered(record) => {
                let figure = dataset_root.join(&record.figure_path);
                assert!(has_png_magic(&figure));
                println!("  rendered {}", record.figure_path);
                stage2::update_pool(&mut pool, &record)?;
                rendered += 1;
            }
            FigureOutcome::Filtered { reason, detail, .. } => println!("  filtered: {reason} {detail}"),
        }
    }
    println!("{rendered} of {} rendered; pool holds {} script(s)", seeds.len(), pool.len());
    Ok((rendered, seeds.len()))
}

pub fn run_example() -> chartforge::Result<(usize, usize)> {
    run_with(&StubSandbox)
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    match std::env::args().nth(1) {
        Some(runner) => run_with(&ShimSandbox::new(Path::new(&runner))),
        None => run_example(),
    }
    .map(|_| ())
}
