// Evaluation metrics: relaxed accuracy, table similarity and BLEU-4.
//
// Run with `cargo run --example metrics`.

use chartforge::eval::{
    bleu4, relaxed_accuracy, relaxed_match, render_scores_text, table_similarity, table_to_triples, EvalScore,
    QAPrediction, DEFAULT_TOLERANCE,
};
use chartforge::model::{TableData, TaskKind};

pub fn run_example() -> chartforge::Result<Vec<EvalScore>> {
    for (pred, gold) in [("26", "25"), ("12.5%", "12.5"), ("1,050", "1000"), ("27", "25"), ("North", " north ")] {
        println!("{pred:>8} vs {gold:<8} -> {}", relaxed_match(pred, gold, DEFAULT_TOLERANCE));
    }
    let preds: Vec<QAPrediction> = [("q1", "26", "25"), ("q2", "Asia", "asia"), ("q3", "40%", "52"), ("q4", "3", "3")]
        .into_iter()
        .map(|(id, p, g)| QAPrediction {
            id: id.into(),
            predicted: p.into(),
            gold: g.into(),
        })
        .collect();
    let accuracy = relaxed_accuracy(&preds, DEFAULT_TOLERANCE)?;

    let gold = TableData::from_text_rows(&["Quarter", "Sales", "Cost"], &[&["Q1", "100", "60"], &["Q2", "120", "70"]])?;
    let pred = TableData::from_text_rows(&["Quarter", "Sales", "Costs"], &[&["Q1", "95", "60"], &["Q2", "120", "75"]])?;
    let (p, r, f1) = table_similarity(&table_to_triples(&pred), &table_to_triples(&gold));
    println!("\nextraction: precision {p:.4} recall {r:.4} f1 {f1:.4}");

    let reference = "The chart shows sales rising from 100 in Q1 to 120 in Q2 while costs grow more slowly.";
    let candidate = "The chart shows sales rising from 100 in Q1 to 120 in Q2 with costs growing slowly.";
    let bleu = bleu4(candidate, &[reference]);
    println!("bleu-4: {bleu:.4}\n");

    let scores = vec![
        EvalScore {
            task: TaskKind::Qa,
            metric: "relaxed_accuracy".into(),
            count: preds.len(),
            value: accuracy,
        },
        EvalScore {
            task: TaskKind::ChartExtraction,
            metric: "f1".into(),
            count: 1,
            value: 100.0 * f1,
        },
        EvalScore {
            task: TaskKind::ChartToText,
            metric: "bleu4".into(),
            count: 1,
            value: 100.0 * bleu,
        },
    ];
    print!("{}", render_scores_text(&scores));
    Ok(scores)
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
