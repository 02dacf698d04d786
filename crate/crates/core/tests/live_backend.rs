//! The live chat-completions client against a local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chartforge::llm::{cache_key, ChatRequest, Gateway, LiveClient, ReplayCache, RetryPolicy};
use chartforge::Error;

#[derive(Clone, Debug)]
struct Seen {
    path: String,
    authorization: String,
    body: serde_json::Value,
}

/// Serve one canned (status, body) per connection, in order; returns the base URL and
/// the requests seen.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let request = read_request(&stream);
            log.lock().unwrap().push(request);
            respond(stream, status, &body);
        }
    });
    (base, seen)
}

fn read_request(stream: &TcpStream) -> Seen {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
    let (mut length, mut authorization) = (0usize, String::new());
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => authorization = value.trim().to_string(),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    Seen {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap(),
    }
}

fn respond(mut stream: TcpStream, status: u16, body: &str) {
    let extra = if status == 429 { "Retry-After: 0\r\n" } else { "" };
    let reply = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n{extra}Connection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(reply.as_bytes()).unwrap();
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 3,
        base_delay: Duration::from_millis(10),
    }
}

#[test]
fn records_exchange_and_keeps_the_key_out_of_the_cache() {
    let (base, seen) = serve(vec![(200, completion("a bar chart"))]);
    let cache_dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::live(LiveClient::new(&base, "sk-test-secret"), ReplayCache::new(cache_dir.path()));
    let request = ChatRequest::new("system", "user").with_model("test-model");
    let exchange = gateway.complete(&request).unwrap();
    assert_eq!(exchange.response_text, "a bar chart");

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization, "Bearer sk-test-secret");
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["messages"][1]["content"], "user");

    let key = cache_key(&request);
    let file = cache_dir.path().join(&key.as_str()[..2]).join(format!("{key}.json"));
    let text = std::fs::read_to_string(file).unwrap();
    assert!(!text.contains("sk-test-secret"));
    let replayed = Gateway::replay(ReplayCache::new(cache_dir.path())).complete(&request).unwrap();
    assert_eq!(replayed.response_text, "a bar chart");
}

#[test]
fn retries_server_errors_and_rate_limits() {
    let (base, seen) = serve(vec![
        (500, "{}".into()),
        (429, "{}".into()),
        (200, completion("ok")),
    ]);
    let cache_dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::live(LiveClient::new(&base, "k"), ReplayCache::new(cache_dir.path())).with_retry(fast_retry());
    let exchange = gateway.complete(&ChatRequest::new("s", "u")).unwrap();
    assert_eq!(exchange.response_text, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_bounded_retries() {
    let (base, seen) = serve(vec![(503, "{}".into()); 4]);
    let cache_dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::live(LiveClient::new(&base, "k"), ReplayCache::new(cache_dir.path())).with_retry(fast_retry());
    let err = gateway.complete(&ChatRequest::new("s", "u")).unwrap_err();
    assert!(matches!(err, Error::Backend { status: Some(503), .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, seen) = serve(vec![(401, "{\"error\": \"bad key\"}".into()), (200, completion("late"))]);
    let cache_dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::live(LiveClient::new(&base, "k"), ReplayCache::new(cache_dir.path())).with_retry(fast_retry());
    let err = gateway.complete(&ChatRequest::new("s", "u")).unwrap_err();
    assert!(matches!(err, Error::Backend { status: Some(401), .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert_eq!(ReplayCache::new(cache_dir.path()).len().unwrap(), 0);
}
