// Stage 3: turn one rendered chart into instruction records for all seven task kinds.
//
// Run with `cargo run --example stage3_instructions`.

use chartforge::llm::Gateway;
use chartforge::mock::MockResponder;
use chartforge::model::{FilterStats, InstructionRecord, TaskKind};
use chartforge::sandbox::StubSandbox;
use chartforge::stage1::{self, SamplingConfig, Stage1Options, ThemePool};
use chartforge::stage2::{self, DocCatalog, ExemplarPool, FigureOutcome, Stage2Context, Stage2PromptVariant};
use chartforge::stage3::{self, Stage3Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> chartforge::Result<Vec<InstructionRecord>> {
    let gateway = Gateway::scripted(MockResponder);
    let sandbox = StubSandbox;
    let work = tempfile::tempdir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let spec = stage1::sample_spec(&SamplingConfig::default(), &ThemePool::builtin(), &mut rng)?;
    let seed = stage1::generate_seed("chart-00000", &spec, &gateway, &Stage1Options::default())?.seed;
    let docs = DocCatalog::builtin();
    let mut ctx2 = Stage2Context::new(&gateway, &sandbox, &docs);
    ctx2.render.scratch_root = work.path().to_path_buf();
    let chart = match stage2::generate_figure(&seed, &ExemplarPool::default(), Stage2PromptVariant::Full, &ctx2, work.path(), &mut rng)? {
        FigureOutcome::Rendered(chart) => chart,
        FigureOutcome::Filtered { reason, .. } => panic!("chart was filtered: {reason}"),
    };

    let mut ctx3 = Stage3Context::new(&gateway, &sandbox);
    ctx3.scratch_root = work.path().to_path_buf();
    let mut stats = FilterStats::default();
    let records = stage3::synthesize(&chart, &TaskKind::ALL, &ctx3, &mut stats, &mut rng)?;
    for record in &records {
        println!("== {} [{}]", record.id, record.task);
        for turn in &record.conversations {
            let text: String = turn.value.chars().take(160).collect();
            println!("  {:?}: {}", turn.from, text.replace('\n', " | "));
        }
    }
    println!("{} records, {} filtered", records.len(), stats.total());
    Ok(records)
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
