//! Every cargo example runs to completion and produces what it prints.

macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code, unused_imports)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(validate_tables);
example!(replay_gateway);
example!(stage1_seed);
example!(stage2_render);
example!(stage3_instructions);
example!(metrics);
example!(rubric_scoring);
example!(ablation);
example!(end_to_end_build);
example!(record_fixture_cache);

use chartforge::model::TaskKind;

#[test]
fn validate_tables_example() {
    assert_eq!(validate_tables::run_example().unwrap(), (2, 3));
}

#[test]
fn replay_gateway_example() {
    assert_eq!(replay_gateway::run_example().unwrap(), 2);
}

#[test]
fn stage1_seed_example() {
    let seed = stage1_seed::run_example().unwrap();
    assert_eq!(seed.table.n_value_cols(), 4);
    assert!(!seed.data_description.is_empty());
}

#[test]
fn stage2_render_example() {
    let (rendered, attempted) = stage2_render::run_example().unwrap();
    assert_eq!(attempted, 6);
    assert!(rendered >= 1);
}

#[test]
fn stage3_instructions_example() {
    let records = stage3_instructions::run_example().unwrap();
    for task in TaskKind::ALL {
        assert!(records.iter().any(|r| r.task == task), "{task}");
    }
}

#[test]
fn metrics_example() {
    let scores = metrics::run_example().unwrap();
    assert_eq!(scores[0].value, 75.0);
    assert!(scores[1].value > 80.0 && scores[1].value < 100.0);
}

#[test]
fn rubric_scoring_example() {
    let (canned, mocked) = rubric_scoring::run_example().unwrap();
    assert!((canned - 84.0).abs() < 1e-9);
    assert!((0.0..=100.0).contains(&mocked));
}

#[test]
fn ablation_example() {
    let report = ablation::run_example().unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows[0].success_rate > report.rows[3].success_rate);
}

#[test]
fn end_to_end_build_example() {
    let summary = end_to_end_build::run_example().unwrap();
    assert_eq!(summary.stats.tasks.len(), 7);
    assert_eq!(summary.stats.chart_types.len(), 10);
}

#[test]
fn record_fixture_cache_example_matches_the_shipped_fixture() {
    let (n, digest) = record_fixture_cache::run_example().unwrap();
    assert!(n > 0);
    let shipped = end_to_end_build::run_example().unwrap();
    assert_eq!(digest, shipped.manifest.digest);
}
