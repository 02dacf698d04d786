// Stage 1: sample a generation spec and turn it into a validated table with descriptions.
//
// Run with `cargo run --example stage1_seed`. Uses the offline mock backend.

use chartforge::llm::Gateway;
use chartforge::mock::MockResponder;
use chartforge::model::{validate_table, ChartSeed, ChartType};
use chartforge::stage1::{self, SamplingConfig, Stage1Options, ThemePool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> chartforge::Result<ChartSeed> {
    let sampling = SamplingConfig {
        chart_weights: [(ChartType::Candlestick, 1.0)].into_iter().collect(),
        ..SamplingConfig::default()
    };
    let spec = stage1::sample_spec(&sampling, &ThemePool::builtin(), &mut ChaCha8Rng::seed_from_u64(7))?;
    println!(
        "spec: {} chart about {:?}, {} rows x {} columns",
        spec.chart_type, spec.theme, spec.n_rows, spec.n_cols
    );

    let prompt = stage1::build_stage1_prompt(&spec);
    println!("--- prompt ---\n{}\n", prompt.user_text);

    let gateway = Gateway::scripted(MockResponder);
    let outcome = stage1::generate_seed("chart-00000", &spec, &gateway, &Stage1Options::default())?;
    let seed = outcome.seed;
    assert!(validate_table(&seed.table, spec.chart_type).is_ok());
    println!("--- table ---\n{}", seed.table.to_csv());
    println!("data description: {}", seed.data_description);
    println!("figure intent: {}", seed.figure_intent);
    Ok(seed)
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
