//! A deterministic offline stand-in for the LLM backend.
//!
//! [`MockResponder`] recognises each pipeline prompt by its system text, reads the
//! parameters back out of the user text and answers in the expected output contract:
//! valid tables for every chart type (honouring the requested trends), runnable
//! Matplotlib scripts, Stage 3 answers computed from the table, and rubric scores.
//! The answer depends only on the request, so recorded caches are reproducible.
//!
//! Plotting scripts occasionally contain a mistake (a missing `savefig` or an unclosed
//! bracket), more often when the prompt carries no function documentation or no
//! example scripts; see [`script_slip_probability`].

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::error::{Error, Result};
use crate::eval;
use crate::fence;
use crate::llm::{cache_key, ChatRequest, Responder};
use crate::model::{format_number, ChartType, TableData, TaskKind, TrendSpec, TrendVerifier};
use crate::{stage1, stage2, stage3};

/// Answers pipeline prompts without a network; see the module docs.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockResponder;

impl Responder for MockResponder {
    fn respond(&mut self, request: &ChatRequest) -> Result<String> {
        mock_response(request)
    }
}

/// The mock answer to `request`.
pub fn mock_response(request: &ChatRequest) -> Result<String> {
    let digest = cache_key(request);
    let seed = u64::from_str_radix(&digest.as_str()[..16], 16).expect("hex digest");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user = request.user_text.as_str();
    match request.system_text.as_str() {
        stage1::THEMES_SYSTEM_PROMPT => Ok(themes(user)),
        stage1::SYSTEM_PROMPT => stage1_answer(user, &mut rng),
        stage2::SYSTEM_PROMPT => stage2_answer(user, &mut rng),
        stage3::SYSTEM_PROMPT => stage3_answer(user, &mut rng),
        eval::RUBRIC_SYSTEM_PROMPT => rubric_answer(user),
        _ => Err(Error::Backend {
            status: None,
            message: "mock backend does not recognise this prompt".into(),
        }),
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

fn capture(text: &str, regex: &Regex) -> Option<String> {
    regex.captures(text).map(|c| c[1].trim().to_string())
}

fn line_value(text: &str, prefix: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(|v| v.trim().to_string())
}

fn first_block(text: &str, label: &str) -> Option<String> {
    fence::scan(text)
        .blocks
        .into_iter()
        .find(|b| fence::normalize_label(&b.label) == label)
        .map(|b| b.body)
}

fn missing(what: &str) -> Error {
    Error::Backend {
        status: None,
        message: format!("mock backend could not find {what} in the prompt"),
    }
}

const EXTRA_THEMES: [&str; 24] = [
    "deep sea fishing yields",
    "museum visitor numbers",
    "electric scooter rentals",
    "honey bee colony health",
    "airport passenger traffic",
    "indie game sales",
    "city park usage",
    "volcanic activity monitoring",
    "online course completion",
    "craft brewery output",
    "hospital emergency visits",
    "wind farm generation",
    "public library loans",
    "marathon finishing times",
    "semiconductor fab capacity",
    "wildfire burned area",
    "podcast listener growth",
    "river water quality",
    "vintage car auctions",
    "school lunch participation",
    "satellite launch cadence",
    "cocoa bean prices",
    "ski resort snowfall",
    "bicycle commuting rates",
];

fn themes(user: &str) -> String {
    static COUNT: OnceLock<Regex> = OnceLock::new();
    let n = capture(user, re(&COUNT, r"List (\d+) distinct themes"))
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(10);
    EXTRA_THEMES
        .iter()
        .cycle()
        .take(n.min(EXTRA_THEMES.len()))
        .map(|t| format!("- {t}"))
        .collect::<Vec<_>>()
        .join("\n")
}

const PALETTES: [&str; 6] = ["viridis", "Set2", "tab10", "plasma", "Dark2", "cividis"];
const CATEGORIES: [&str; 12] = [
    "North", "South", "East", "West", "Central", "Coastal", "Highland", "Valley", "Metro", "Rural", "Island",
    "Lakeside",
];
const MONTHS: [&str; 12] = ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];
const TASKS: [&str; 12] = [
    "Planning", "Research", "Design", "Prototype", "Procurement", "Build", "Integration", "Testing", "Review",
    "Training", "Launch", "Support",
];
const MEASURES: [&str; 6] = ["Revenue", "Output", "Users", "Demand", "Cost", "Score"];

fn title_case(text: &str) -> String {
    text.split_whitespace()
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn labels(kind: &[&str], n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if i < kind.len() {
                kind[i].to_string()
            } else {
                format!("{} {}", kind[i % kind.len()], i / kind.len() + 1)
            }
        })
        .collect()
}

fn key_column(chart_type: ChartType, n: usize, rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    match chart_type {
        ChartType::Candlestick => {
            let start = rng.gen_range(1..=10);
            ("Date".into(), (0..n).map(|i| format!("2024-03-{:02}", start + i)).collect())
        }
        ChartType::Gantt => ("Task".into(), labels(&TASKS, n)),
        ChartType::Line | ChartType::Area => {
            if rng.gen_bool(0.5) {
                let start = rng.gen_range(2000..=2012);
                ("Year".into(), (0..n).map(|i| (start + i as i32).to_string()).collect())
            } else {
                ("Month".into(), labels(&MONTHS, n))
            }
        }
        ChartType::Funnel => (
            "Stage".into(),
            labels(&["Visit", "Sign-up", "Trial", "Quote", "Purchase", "Renewal"], n),
        ),
        _ => ("Region".into(), labels(&CATEGORIES, n)),
    }
}

fn value_headers(chart_type: ChartType, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    match chart_type {
        ChartType::Pie => vec!["Share".into()],
        ChartType::Candlestick => ["Open", "High", "Low", "Close"].map(String::from).to_vec(),
        ChartType::Gantt => labels(&["Start", "Duration", "Team Size", "Budget"], n),
        ChartType::Box => labels(&["Group A", "Group B", "Group C", "Group D"], n),
        ChartType::Scatter => labels(&["Spend", "Sales", "Visits", "Returns"], n),
        _ => {
            let mut m = MEASURES.to_vec();
            m.shuffle(rng);
            labels(&m, n)
        }
    }
}

/// A series of `n` integer-valued points following `verifier`.
fn trend_series(verifier: Option<TrendVerifier>, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.gen_range(40..=200) as f64;
    let step = (base * 0.08).round().max(3.0);
    let noise = |rng: &mut ChaCha8Rng| rng.gen_range(-1..=1) as f64;
    let mid = n / 2;
    (0..n)
        .map(|i| {
            let i_f = i as f64;
            match verifier {
                Some(TrendVerifier::MonotoneUp) => base + i_f * step + noise(rng),
                Some(TrendVerifier::MonotoneDown) => base + (n - 1 - i) as f64 * step + noise(rng),
                Some(TrendVerifier::Spike) if i == mid => (base * 1.9).round(),
                Some(TrendVerifier::Dip) if i == mid => (base * 0.4).round(),
                Some(TrendVerifier::Spike | TrendVerifier::Dip | TrendVerifier::Flat) => base + noise(rng),
                Some(TrendVerifier::Oscillating) => base + if i % 2 == 0 { step * 2.0 } else { -step * 2.0 },
                None => base + rng.gen_range(-4..=4) as f64 * step,
            }
        })
        .map(|v: f64| v.max(1.0))
        .collect()
}

fn requested_trends(user: &str) -> Vec<Option<TrendVerifier>> {
    static TREND: OnceLock<Regex> = OnceLock::new();
    let regex = re(&TREND, r"(?m)^- column (\d+): (.+)$");
    let builtin = TrendSpec::builtin();
    let mut out = Vec::new();
    for caps in regex.captures_iter(user) {
        let idx: usize = caps[1].parse().unwrap_or(0);
        let label = caps[2].trim();
        let verifier = builtin.iter().find(|t| t.label == label).map(|t| t.verifier);
        if idx >= 1 {
            if out.len() < idx {
                out.resize(idx, None);
            }
            out[idx - 1] = verifier;
        }
    }
    out
}

fn pie_shares(n: usize, verifier: Option<TrendVerifier>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..10.0)).collect();
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / total * 100.0).collect();
    let mut shares: Vec<f64> = raw.iter().map(|r| r.floor().max(1.0)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let mut k = 0;
    while shares.iter().sum::<f64>() < 100.0 {
        shares[order[k % n]] += 1.0;
        k += 1;
    }
    while shares.iter().sum::<f64>() > 100.0 {
        let i = (0..n).max_by(|&a, &b| shares[a].total_cmp(&shares[b])).unwrap();
        shares[i] -= 1.0;
    }
    match verifier {
        Some(TrendVerifier::MonotoneUp) => shares.sort_by(f64::total_cmp),
        Some(TrendVerifier::MonotoneDown) => shares.sort_by(|a, b| b.total_cmp(a)),
        _ => {}
    }
    shares
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn ohlc(n: usize, verifier: Option<TrendVerifier>, rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    let closes = trend_series(verifier, n, rng);
    let mut open = round1(closes[0] - rng.gen_range(-2.0..2.0));
    let mut rows = Vec::with_capacity(n);
    for close in closes {
        let close = round1(close);
        let high = round1(open.max(close) + rng.gen_range(0.5..4.0));
        let low = round1((open.min(close) - rng.gen_range(0.5..4.0)).max(0.1));
        rows.push([open, high, low, close]);
        open = close;
    }
    rows
}

fn build_table(chart_type: ChartType, n_rows: usize, n_value: usize, trends: &[Option<TrendVerifier>], rng: &mut ChaCha8Rng) -> TableData {
    let (key, keys) = key_column(chart_type, n_rows, rng);
    let heads = value_headers(chart_type, n_value, rng);
    let trend = |i: usize| trends.get(i).copied().flatten();
    let columns: Vec<Vec<f64>> = match chart_type {
        ChartType::Pie => vec![pie_shares(n_rows, trend(0), rng)],
        ChartType::Candlestick => {
            let rows = ohlc(n_rows, trend(0), rng);
            (0..4).map(|c| rows.iter().map(|r| r[c]).collect()).collect()
        }
        ChartType::Gantt => (0..n_value)
            .map(|c| match c {
                0 => {
                    let mut t = 0.0;
                    (0..n_rows)
                        .map(|_| {
                            let s = t;
                            t += rng.gen_range(2..=6) as f64;
                            s
                        })
                        .collect()
                }
                1 => (0..n_rows).map(|_| rng.gen_range(3..=12) as f64).collect(),
                _ => trend_series(trend(c), n_rows, rng),
            })
            .collect(),
        _ => (0..n_value).map(|c| trend_series(trend(c), n_rows, rng)).collect(),
    };
    let mut headers = vec![key];
    headers.extend(heads);
    let rows: Vec<Vec<String>> = keys
        .iter()
        .enumerate()
        .map(|(r, k)| {
            let mut row = vec![k.clone()];
            row.extend(columns.iter().map(|col| format_number(col[r])));
            row
        })
        .collect();
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    let row_refs: Vec<Vec<&str>> = rows.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let row_slices: Vec<&[&str]> = row_refs.iter().map(Vec::as_slice).collect();
    TableData::from_text_rows(&header_refs, &row_slices).expect("mock table is rectangular")
}

fn trend_phrase(v: TrendVerifier) -> &'static str {
    match v {
        TrendVerifier::MonotoneUp => "rises steadily",
        TrendVerifier::MonotoneDown => "falls steadily",
        TrendVerifier::Spike => "jumps sharply at one point",
        TrendVerifier::Dip => "drops sharply at one point",
        TrendVerifier::Flat => "stays roughly stable",
        TrendVerifier::Oscillating => "swings up and down",
    }
}

fn stage1_answer(user: &str, rng: &mut ChaCha8Rng) -> Result<String> {
    let theme = line_value(user, "Theme:").ok_or_else(|| missing("the theme"))?;
    let chart_type: ChartType = line_value(user, "Chart type:")
        .ok_or_else(|| missing("the chart type"))?
        .parse()?;
    let n_rows: usize = line_value(user, "Rows:")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| missing("the row count"))?;
    let n_cols: usize = line_value(user, "Columns:")
        .and_then(|v| v.split_whitespace().next().and_then(|n| n.parse().ok()))
        .ok_or_else(|| missing("the column count"))?;
    let n_value = chart_type.fixed_value_columns().unwrap_or(n_cols.saturating_sub(1).max(1));
    let trends = requested_trends(user);
    let table = build_table(chart_type, n_rows, n_value, &trends, rng);

    let first = table.numeric_column(0).unwrap_or_default();
    let (imax, vmax) = first
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, v)| (i, *v))
        .unwrap_or((0, 0.0));
    let measure = &table.value_headers()[0];
    let mut data = format!(
        "The table reports {} for {theme} across {} {} entries.",
        table.value_headers().join(", ").to_lowercase(),
        table.n_rows(),
        table.key_header().to_lowercase()
    );
    for (i, t) in trends.iter().enumerate() {
        if let (Some(t), Some(h)) = (t, table.value_headers().get(i)) {
            data.push_str(&format!(" {h} {}.", trend_phrase(*t)));
        }
    }
    data.push_str(&format!(
        " The highest {} is {} for {}.",
        measure.to_lowercase(),
        format_number(vmax),
        table.row_keys()[imax]
    ));
    let palette = PALETTES.choose(rng).expect("palettes");
    let title = title_case(&theme);
    let figure = format!(
        "A {chart_type} chart titled \"{title}\" using the {palette} palette, with axis labels, a legend and an \
annotation pointing out the highest {}.",
        measure.to_lowercase()
    );
    Ok(stage1::render_stage1_output(&table, &data, &figure))
}

fn py_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn py_list<T, F: Fn(&T) -> String>(items: &[T], f: F) -> String {
    format!("[{}]", items.iter().map(f).collect::<Vec<_>>().join(", "))
}

fn script_for(chart_type: ChartType, table: &TableData, title: &str, palette: &str) -> String {
    let mut s = String::from("import matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\nimport numpy as np\n");
    if chart_type == ChartType::Candlestick {
        s.push_str("from matplotlib.patches import Patch\n");
    }
    s.push('\n');
    s.push_str(&format!("labels = {}\n", py_list(table.row_keys(), |k| py_str(k))));
    s.push_str("series = {\n");
    for (i, h) in table.value_headers().iter().enumerate() {
        let vals = table.numeric_column(i).unwrap_or_else(|| vec![0.0; table.n_rows()]);
        s.push_str(&format!("    {}: {},\n", py_str(h), py_list(&vals, |v| format_number(*v))));
    }
    s.push_str("}\n");
    s.push_str(&format!("key_label = {}\n", py_str(table.key_header())));
    s.push_str(&format!("title = {}\n", py_str(title)));
    s.push_str(&format!(
        "colors = plt.get_cmap({})(np.linspace(0.15, 0.85, max(len(series), len(labels))))\n\n",
        py_str(palette)
    ));
    s.push_str("fig, ax = plt.subplots(figsize=(8, 5))\n");
    s.push_str("names = list(series)\nfirst = np.array(series[names[0]], dtype=float)\nx = np.arange(len(labels))\n");
    let styles = ["-", "--", "-.", ":"];
    let markers = ["o", "s", "^", "D"];
    let body = match chart_type {
        ChartType::Bar => "width = 0.8 / len(series)\n\
for i, name in enumerate(names):\n    offset = (i - (len(series) - 1) / 2) * width\n    ax.bar(x + offset, series[name], width, label=name, color=colors[i], edgecolor=\"black\", linewidth=0.5)\n\
ax.set_xticks(x, labels, rotation=30, ha=\"right\")\n\
ax.set_xlabel(key_label)\nax.set_ylabel(\"Value\")\n\
peak = int(np.argmax(first))\n\
ax.annotate(f\"max {first[peak]:g}\", xy=(x[peak] - (len(series) - 1) / 2 * width, first[peak]), xytext=(0, 8), textcoords=\"offset points\", ha=\"center\")\n\
ax.legend()\n"
            .to_string(),
        ChartType::Line => format!(
            "styles = {}\nmarkers = {}\n\
for i, name in enumerate(names):\n    ax.plot(x, series[name], linestyle=styles[i % len(styles)], marker=markers[i % len(markers)], color=colors[i], label=name)\n\
ax.set_xticks(x, labels, rotation=30, ha=\"right\")\n\
ax.set_xlabel(key_label)\nax.set_ylabel(\"Value\")\n\
peak = int(np.argmax(first))\n\
ax.annotate(f\"peak {{first[peak]:g}}\", xy=(x[peak], first[peak]), xytext=(10, 10), textcoords=\"offset points\", arrowprops=dict(arrowstyle=\"->\"))\n\
ax.grid(alpha=0.3)\nax.legend()\n",
            py_list(&styles[..], |s| py_str(s)),
            py_list(&markers[..], |s| py_str(s))
        ),
        ChartType::Area => "ax.stackplot(x, *[series[n] for n in names], labels=names, colors=colors[:len(names)], alpha=0.85)\n\
ax.set_xticks(x, labels, rotation=30, ha=\"right\")\n\
ax.set_xlabel(key_label)\nax.set_ylabel(\"Value\")\n\
total = np.sum([series[n] for n in names], axis=0)\n\
ax.annotate(f\"total {total[-1]:g}\", xy=(x[-1], total[-1]), xytext=(-60, 10), textcoords=\"offset points\")\n\
ax.legend(loc=\"upper left\")\n"
            .to_string(),
        ChartType::Pie => "ax.pie(first, labels=labels, colors=colors[:len(labels)], autopct=\"%1.1f%%\", startangle=90, wedgeprops=dict(edgecolor=\"white\"))\n\
ax.axis(\"equal\")\n\
ax.legend(title=key_label, loc=\"center left\", bbox_to_anchor=(1.0, 0.5))\n\
big = int(np.argmax(first))\n\
ax.text(-1.4, -1.3, f\"largest: {labels[big]} ({first[big]:g}%)\")\n"
            .to_string(),
        ChartType::Funnel => "ax.barh(x, first, left=-first / 2, color=colors[:len(labels)], edgecolor=\"black\", label=names[0])\n\
for i, v in enumerate(first):\n    ax.text(0, i, f\"{v:g}\", ha=\"center\", va=\"center\", color=\"white\", fontweight=\"bold\")\n\
ax.set_yticks(x, labels)\nax.invert_yaxis()\nax.set_xticks([])\n\
ax.set_ylabel(key_label)\n\
ax.annotate(f\"conversion {first[-1] / first[0] * 100:.0f}%\", xy=(0, len(labels) - 1), xytext=(first[0] / 4, len(labels) - 1.4))\n\
ax.legend()\n"
            .to_string(),
        ChartType::Gantt => "if len(names) >= 2:\n    start = first\n    duration = np.array(series[names[1]], dtype=float)\n\
else:\n    duration = first\n    start = np.concatenate([[0], np.cumsum(duration)[:-1]])\n\
ax.barh(x, duration, left=start, height=0.5, color=colors[:len(labels)], edgecolor=\"black\", label=\"Duration\")\n\
ax.set_yticks(x, labels)\nax.invert_yaxis()\n\
ax.set_xlabel(\"Day\")\nax.set_ylabel(key_label)\n\
end = start + duration\n\
ax.annotate(f\"finish: day {end.max():g}\", xy=(end.max(), int(np.argmax(end))), xytext=(5, 0), textcoords=\"offset points\", va=\"center\")\n\
ax.grid(axis=\"x\", linestyle=\":\", alpha=0.6)\nax.legend()\n"
            .to_string(),
        ChartType::Heatmap => format!(
            "matrix = np.array([series[n] for n in names], dtype=float).T\n\
im = ax.imshow(matrix, cmap={}, aspect=\"auto\")\n\
fig.colorbar(im, ax=ax, label=\"Value\")\n\
ax.set_xticks(np.arange(len(names)), names)\nax.set_yticks(x, labels)\n\
ax.set_xlabel(\"Measure\")\nax.set_ylabel(key_label)\n\
for r in range(matrix.shape[0]):\n    for c in range(matrix.shape[1]):\n        ax.text(c, r, f\"{{matrix[r, c]:g}}\", ha=\"center\", va=\"center\", fontsize=8, color=\"white\")\n",
            py_str(palette)
        ),
        ChartType::Scatter => "if len(names) >= 2:\n    xs = first\n    ys = names[1:]\n    ax.set_xlabel(names[0])\n\
else:\n    xs = x\n    ys = names\n    ax.set_xlabel(key_label)\n\
for i, name in enumerate(ys):\n    ax.scatter(xs, series[name], s=60, color=colors[i], edgecolor=\"black\", label=name)\n\
for i, lab in enumerate(labels):\n    ax.annotate(lab, (xs[i], series[ys[0]][i]), xytext=(4, 4), textcoords=\"offset points\", fontsize=8)\n\
ax.set_ylabel(\"Value\")\nax.grid(alpha=0.3)\nax.legend()\n"
            .to_string(),
        ChartType::Box => "data = [series[n] for n in names]\n\
bp = ax.boxplot(data, patch_artist=True)\n\
for patch, color in zip(bp[\"boxes\"], colors):\n    patch.set_facecolor(color)\n\
ax.set_xticks(np.arange(1, len(names) + 1), names)\n\
ax.set_xlabel(\"Group\")\nax.set_ylabel(\"Value\")\n\
ax.annotate(f\"median {np.median(first):g}\", xy=(1, np.median(first)), xytext=(1.3, np.max(first)))\n\
ax.legend(bp[\"boxes\"], names)\n"
            .to_string(),
        ChartType::Candlestick => "o = np.array(series.get(\"Open\", series[names[0]]), dtype=float)\n\
h = np.array(series.get(\"High\", series[names[1]]), dtype=float)\n\
l = np.array(series.get(\"Low\", series[names[2]]), dtype=float)\n\
c = np.array(series.get(\"Close\", series[names[3]]), dtype=float)\n\
up = c >= o\n\
body_colors = [colors[-1] if u else colors[0] for u in up]\n\
ax.vlines(x, l, h, color=\"black\", linewidth=1)\n\
ax.bar(x, np.abs(c - o) + 0.05, bottom=np.minimum(o, c), width=0.6, color=body_colors, edgecolor=\"black\")\n\
ax.set_xticks(x, labels, rotation=45, ha=\"right\")\n\
ax.set_xlabel(key_label)\nax.set_ylabel(\"Price\")\n\
top = int(np.argmax(h))\n\
ax.annotate(f\"high {h[top]:g}\", xy=(x[top], h[top]), xytext=(0, 8), textcoords=\"offset points\", ha=\"center\")\n\
ax.legend(handles=[Patch(color=colors[-1], label=\"Up\"), Patch(color=colors[0], label=\"Down\")])\n"
            .to_string(),
    };
    s.push_str(&body);
    s.push_str("ax.set_title(title)\nfig.tight_layout()\nplt.savefig(\"figure.png\", dpi=100)\n");
    s
}

/// Chance that a mock plotting script is broken, given what the prompt contains.
pub fn script_slip_probability(has_docs: bool, has_examples: bool) -> f64 {
    0.05 + if has_docs { 0.0 } else { 0.15 } + if has_examples { 0.0 } else { 0.25 }
}

fn slip(script: &str, rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.5) {
        script.replace("plt.savefig(\"figure.png\", dpi=100)", "plt.show()")
    } else {
        script.replacen("fig, ax = plt.subplots(figsize=(8, 5))", "fig, ax = plt.subplots(figsize=(8, 5)", 1)
    }
}

fn stage2_answer(user: &str, rng: &mut ChaCha8Rng) -> Result<String> {
    static TYPE: OnceLock<Regex> = OnceLock::new();
    static TITLE: OnceLock<Regex> = OnceLock::new();
    static PALETTE: OnceLock<Regex> = OnceLock::new();
    let chart_type: ChartType = capture(user, re(&TYPE, r"draws an? (\w+) chart"))
        .ok_or_else(|| missing("the chart type"))?
        .parse()?;
    let csv = first_block(user, "csv").ok_or_else(|| missing("the data block"))?;
    let table = TableData::from_csv(&csv)?;
    let intent = line_value(user, "Figure intent:").unwrap_or_default();
    let title = capture(&intent, re(&TITLE, r#"titled "([^"]+)""#)).unwrap_or_else(|| "Chart".into());
    let palette = capture(&intent, re(&PALETTE, r"the (\w+) palette")).unwrap_or_else(|| "viridis".into());
    let mut script = script_for(chart_type, &table, &title, &palette);
    let has_docs = user.contains("\nDocumentation of functions");
    let has_examples = user.contains("\nExamples of scripts");
    if rng.gen_bool(script_slip_probability(has_docs, has_examples)) {
        script = slip(&script, rng);
    }
    Ok(format!("Here is the script.\n\n{}\n", fence::wrap("python", &script)))
}

fn qa_pair(tag: &str, table: &TableData, rng: &mut ChaCha8Rng) -> (String, String) {
    let col = rng.gen_range(0..table.n_value_cols());
    let measure = &table.value_headers()[col];
    let values = table.numeric_column(col).unwrap_or_default();
    let keys = table.row_keys();
    let key = table.key_header().to_lowercase();
    let total: f64 = values.iter().sum();
    let a = rng.gen_range(0..keys.len());
    let b = (a + 1 + rng.gen_range(0..keys.len().max(2) - 1)) % keys.len();
    let fmt = |v: f64| format_number((v * 100.0).round() / 100.0);
    match tag {
        "extremum" => {
            let i = (0..values.len()).max_by(|&x, &y| values[x].total_cmp(&values[y])).unwrap_or(0);
            (format!("Which {key} has the highest {measure}?"), keys[i].clone())
        }
        "comparison" => {
            let winner = if values[a] >= values[b] { &keys[a] } else { &keys[b] };
            (format!("Is {measure} higher for {} or for {}?", keys[a], keys[b]), winner.clone())
        }
        "trend" => {
            let dir = if values.last() >= values.first() { "rise" } else { "fall" };
            (
                format!("Does {measure} rise or fall from {} to {}?", keys[0], keys[keys.len() - 1]),
                dir.into(),
            )
        }
        "proportion" if total != 0.0 => (
            format!("What share of the total {measure} comes from {}? Answer in percent.", keys[a]),
            format!("{}%", format_number((values[a] / total * 1000.0).round() / 10.0)),
        ),
        "aggregate" => (format!("What is the total {measure} across all {key} entries?"), fmt(total)),
        "counterfactual" => (
            format!("If {measure} for {} doubled, what would the total {measure} be?", keys[a]),
            fmt(total + values[a]),
        ),
        _ => (format!("What is the {measure} value for {}?", keys[a]), fmt(values[a])),
    }
}

fn edit_script(script: &str, new_title: &str) -> String {
    let mut out = Vec::new();
    for line in script.lines() {
        if line.starts_with("plt.savefig(") {
            out.push("ax.grid(True, linestyle=\":\", alpha=0.6)".to_string());
            out.push(format!("ax.set_title({})", py_str(new_title)));
        }
        out.push(line.to_string());
    }
    out.join("\n")
}

fn stage3_answer(user: &str, rng: &mut ChaCha8Rng) -> Result<String> {
    let task: TaskKind = line_value(user, "Task:").ok_or_else(|| missing("the task"))?.parse()?;
    let chart_type = line_value(user, "Chart type:").unwrap_or_else(|| "chart".into());
    let csv = first_block(user, "csv").ok_or_else(|| missing("the data block"))?;
    let table = TableData::from_csv(&csv)?;
    let data_desc = line_value(user, "Data description:").unwrap_or_default();
    let fig_desc = line_value(user, "Figure description:").unwrap_or_default();
    let w = |label: &str, body: &str| fence::wrap(label, body);
    Ok(match task {
        TaskKind::Qa => {
            static N: OnceLock<Regex> = OnceLock::new();
            static TAGS: OnceLock<Regex> = OnceLock::new();
            let n: usize = capture(user, re(&N, r"Write (\d+) question-answer pairs"))
                .and_then(|v| v.parse().ok())
                .unwrap_or(3);
            let tags: Vec<String> = capture(user, re(&TAGS, r"characteristics: ([^.]+)\."))
                .map(|t| t.split(',').map(|s| s.trim().to_string()).collect())
                .unwrap_or_default();
            (1..=n)
                .map(|i| {
                    let tag = tags.get(i - 1).map(String::as_str).unwrap_or("axis-reading");
                    let (q, a) = qa_pair(tag, &table, rng);
                    format!("{}\n{}\n", w(&format!("question-{i}"), &q), w(&format!("answer-{i}"), &a))
                })
                .collect()
        }
        TaskKind::ChartToText => format!(
            "{}\n{}\n",
            w("instruction", "Summarise the main message of this chart in a few sentences."),
            w("answer", &format!("This {chart_type} chart shows the data at a glance. {data_desc}"))
        ),
        TaskKind::DetailedDescription => format!(
            "{}\n{}\n",
            w("instruction", "Describe this chart in detail, covering both its data and its appearance."),
            w(
                "answer",
                &format!(
                    "Visually, it is {}. It has {} {} entries and the value columns {}. {data_desc}",
                    fig_desc.trim_end_matches('.').to_lowercase(),
                    table.n_rows(),
                    table.key_header().to_lowercase(),
                    table.value_headers().join(", ")
                )
            )
        ),
        TaskKind::ChartExtraction => format!(
            "{}\n{}\n",
            w("instruction", "Extract the underlying data table of this chart as CSV."),
            w("csv", &table.to_csv())
        ),
        TaskKind::ChartToChart => {
            let script = first_block(user, "python").ok_or_else(|| missing("the plotting script"))?;
            format!(
                "{}\n{}\n",
                w("instruction", "Write Matplotlib code that reproduces this chart."),
                w("python", &script)
            )
        }
        TaskKind::TextToChart => w(
            "instruction",
            &format!("Draw a {chart_type} chart of the table below. {fig_desc}"),
        ) + "\n",
        TaskKind::ChartEditing => {
            let script = first_block(user, "python").ok_or_else(|| missing("the plotting script"))?;
            let new_title = format!("{} (revised)", table.value_headers()[0]);
            format!(
                "{}\n{}\n",
                w(
                    "instruction",
                    &format!("Add a dotted grid to the chart and change its title to \"{new_title}\".")
                ),
                w("python", &edit_script(&script, &new_title))
            )
        }
    })
}

fn token_overlap(a: &str, b: &str) -> f64 {
    let ta: std::collections::BTreeSet<&str> = a.split_whitespace().collect();
    let tb: std::collections::BTreeSet<&str> = b.split_whitespace().collect();
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / ta.union(&tb).count() as f64
}

fn rubric_answer(user: &str) -> Result<String> {
    static CRIT: OnceLock<Regex> = OnceLock::new();
    static SCALE: OnceLock<Regex> = OnceLock::new();
    let criteria: Vec<String> = re(&CRIT, r"(?m)^CRITERION: (.+) SCORE: <int>$")
        .captures_iter(user)
        .map(|c| c[1].to_string())
        .collect();
    if criteria.is_empty() {
        return Err(missing("the rubric criteria"));
    }
    let (lo, hi): (i64, i64) = re(&SCALE, r"integer from (\d+) to (\d+)")
        .captures(user)
        .map(|c| (c[1].parse().unwrap_or(0), c[2].parse().unwrap_or(5)))
        .unwrap_or((0, 5));
    // Compare the prediction (last block) with the first reference block.
    let blocks = fence::scan(user).blocks;
    let similarity = match (blocks.first(), blocks.last()) {
        (Some(r), Some(p)) if blocks.len() >= 2 => token_overlap(&r.body, &p.body),
        _ => 0.5,
    };
    let mut scores = BTreeMap::new();
    for (i, c) in criteria.iter().enumerate() {
        let bonus = if i % 2 == 0 { 0.0 } else { -0.5 };
        let s = (lo as f64 + (hi - lo) as f64 * similarity + bonus).round() as i64;
        scores.insert(c.clone(), s.clamp(lo, hi));
    }
    let mut out = format!(
        "The prediction overlaps with the reference at about {:.0}% of its tokens; scores reflect that agreement.\n\n",
        similarity * 100.0
    );
    for c in &criteria {
        out.push_str(&format!("CRITERION: {c} SCORE: {}\n", scores[c]));
    }
    Ok(out)
}
