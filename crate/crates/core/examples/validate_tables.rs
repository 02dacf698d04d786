// Check tables against chart-type constraints and series against trend phrases.
//
// Run with `cargo run --example validate_tables`.

use chartforge::model::{check_trend, validate_table, ChartType, TableData, TrendSpec};

/// Returns (tables accepted, tables rejected).
pub fn run_example() -> chartforge::Result<(usize, usize)> {
    let cases: Vec<(ChartType, TableData)> = vec![
        (
            ChartType::Pie,
            TableData::from_text_rows(&["Channel", "Share"], &[&["Web", "45"], &["Store", "35"], &["Phone", "20"]])?,
        ),
        (
            ChartType::Pie,
            TableData::from_text_rows(&["Channel", "Share"], &[&["Web", "45"], &["Store", "35"], &["Phone", "30"]])?,
        ),
        (
            ChartType::Candlestick,
            TableData::from_text_rows(
                &["Day", "Open", "High", "Low", "Close"],
                &[&["Mon", "10", "12", "9", "11"], &["Tue", "11", "13", "10.5", "12.5"]],
            )?,
        ),
        (
            ChartType::Candlestick,
            TableData::from_text_rows(&["Day", "Open", "High", "Low", "Close"], &[&["Mon", "10", "9", "12", "11"]])?,
        ),
        (
            ChartType::Bar,
            TableData::from_text_rows(&["Region", "Sales"], &[&["North", "120"], &["South", "n/a"]])?,
        ),
    ];

    let (mut accepted, mut rejected) = (0, 0);
    for (chart_type, table) in &cases {
        let report = validate_table(table, *chart_type);
        if report.is_ok() {
            accepted += 1;
            println!("{chart_type:<12} ok");
        } else {
            rejected += 1;
            println!("{chart_type:<12} rejected: {}", report.violations.join("; "));
        }
    }

    let series = [3.0, 4.1, 5.0, 6.2, 7.9];
    let reversed: Vec<f64> = series.iter().rev().copied().collect();
    println!();
    for trend in TrendSpec::builtin() {
        println!(
            "{:<26} forward {:<5} reversed {}",
            trend.label,
            check_trend(&series, &trend)?,
            check_trend(&reversed, &trend)?
        );
    }
    Ok((accepted, rejected))
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
