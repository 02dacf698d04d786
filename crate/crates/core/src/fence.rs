//! Markdown-style fenced block scanning shared by every stage's output parser.

/// One fenced block: the info string after the opening fence and the body lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    pub label: String,
    pub body: String,
    /// 1-based line of the opening fence.
    pub line: usize,
}

/// Result of scanning a text for fenced blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FenceScan {
    pub blocks: Vec<FencedBlock>,
    /// Set when the text ends inside an open fence; the partial block is discarded.
    pub unterminated: Option<usize>,
}

const FENCE: &str = "```";

/// Scan `text` for fenced blocks. A fence is a line whose trimmed content starts with
/// three backticks; the opening fence may carry a label, the closing fence may not.
pub fn scan(text: &str) -> FenceScan {
    let mut scan = FenceScan::default();
    let mut open: Option<(String, usize, Vec<&str>)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        let trimmed = line.trim();
        match open.as_mut() {
            None => {
                if let Some(rest) = trimmed.strip_prefix(FENCE) {
                    let label = rest.trim_start_matches('`').trim().to_string();
                    open = Some((label, idx + 1, Vec::new()));
                }
            }
            Some((_, _, body)) => {
                if trimmed.starts_with(FENCE) && trimmed.trim_start_matches('`').trim().is_empty() {
                    let (label, line_no, body) = open.take().expect("open fence");
                    scan.blocks.push(FencedBlock {
                        label,
                        body: body.join("\n"),
                        line: line_no,
                    });
                } else {
                    body.push(line);
                }
            }
        }
    }
    if let Some((_, line_no, _)) = open {
        scan.unterminated = Some(line_no);
    }
    scan
}

/// Wrap `body` in a fence labelled `label`.
pub fn wrap(label: &str, body: &str) -> String {
    let body = body.trim_end_matches('\n');
    format!("{FENCE}{label}\n{body}\n{FENCE}")
}

/// Normalise a fence label for comparison: lowercase, spaces and underscores become dashes.
pub fn normalize_label(label: &str) -> String {
    label
        .trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '_' { '-' } else { c })
        .collect()
}
