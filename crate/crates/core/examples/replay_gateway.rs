// Record LLM exchanges once, then replay them offline by request digest.
//
// Run with `cargo run --example replay_gateway`.

use chartforge::llm::{cache_key, ChatRequest, Gateway, ReplayCache, ScriptQueue};
use chartforge::Error;

/// Returns the number of cached exchanges.
pub fn run_example() -> chartforge::Result<usize> {
    let dir = tempfile::tempdir()?;
    let request = ChatRequest::new("You answer briefly.", "Name a chart type.");
    let other = ChatRequest::new("You answer briefly.", "Name another chart type.");

    let recorder = Gateway::scripted(ScriptQueue::new(["funnel", "gantt"])).recording_into(ReplayCache::new(dir.path()));
    let first = recorder.complete(&request)?;
    recorder.complete(&other)?;
    println!("recorded {:?} under {}", first.response_text, cache_key(&request));

    let replay = Gateway::replay(ReplayCache::new(dir.path()));
    let again = replay.complete(&request)?;
    assert_eq!(again.response_text, first.response_text);
    println!("replayed {:?}", again.response_text);

    match replay.complete(&ChatRequest::new("You answer briefly.", "Something new.")) {
        Err(e @ Error::CacheMiss { .. }) => println!("unrecorded request: {e}"),
        other => panic!("expected a cache miss, got {other:?}"),
    }
    ReplayCache::new(dir.path()).len()
}

#[allow(dead_code)]
fn main() -> chartforge::Result<()> {
    run_example().map(|_| ())
}
