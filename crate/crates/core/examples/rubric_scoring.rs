// Rubric evaluation: build the evaluator prompt, score with a model, parse the verdict.
//
// Run with `cargo run --example rubric_scoring`.

use chartforge::eval::{build_rubric_prompt, evaluate_rubric, parse_rubric_scores, rubric_for, RubricConditions};
use chartforge::llm::{Gateway, DEFAULT_MODEL};
use chartforge::mock::MockResponder;
use chartforge::model::TaskKind;

/// Returns (canned-response score, mock-evaluator score).
pub fn run_example() -> chartforge::Result<(f64, f64)> {
    let gold = "import matplotlib.pyplot as plt\nplt.bar(['a', 'b'], [3, 5], color='tab:blue')\nplt.title('Sales')\nplt.savefig('figure.png')\n";
    let predicted = "import matplotlib.pyplot as plt\nplt.bar(['a', 'b'], [3, 4], color='tab:red')\nplt.title('Sales')\nplt.savefig('figure.png')\n";
    let conditions = RubricConditions {
        gold_script: Some(gold.into()),
        predicted_script: Some(predicted.into()),
        ..Default::default()
    };

    let rubric = rubric_for(TaskKind::ChartToChart).expect("chart_to_chart has a rubric");
    println!("criteria {:?}, scale {:?}", rubric.criteria, rubric.scale);
    let prompt = build_rubric_prompt(TaskKind::ChartToChart, &conditions)?;
    println!("--- evaluator prompt ---\n{}\n", prompt.user_text);

    let canned = "The data differ in one bar and the color changed.\n\
CRITERION: data SCORE: 4\nCRITERION: axes SCORE: 5\nCRITERION: colors SCORE: 3\n\
CRITERION: chart types SCORE: 5\nCRITERION: titles SCORE: 4\n";
    let parsed = parse_rubric_scores(canned, TaskKind::ChartToChart)?;
    println!("canned verdict: {:?} -> {:.1}", parsed.criterion_scores, parsed.normalized);

    let gateway = Gateway::scripted(MockResponder);
    let mocked = evaluate_rubric(&gateway, TaskKind::ChartToChart, &conditions, DEFAULT_MODEL)?;
    println!("mock evaluator: {:.1}", mocked.normalized);

    let missing = RubricConditions {
        original_script: Some(gold.into()),
        predicted_script: Some(predicted.into()),
        ..Default::default()
    };
    if let Err(e) = build_rubric_prompt(TaskKind::ChartEditing, &missing) {
        println!("chart_editing without an edit instruction: {e}");
    }
    Ok((parsed.normalized, mocked.normalized))
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
