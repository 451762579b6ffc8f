use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cds::corpus::TaskKind;
use cds::inference::{
    generate, DecodingParams, Dialect, Endpoint, GenerationRequest, HttpModel, InferenceError, ModelClient,
    RetryPolicy, Secret,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves `replies` (status, body) in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (addr, seen)
}

fn client(base_url: String, dialect: Dialect, token: Option<&str>) -> HttpModel {
    HttpModel::new(Endpoint {
        base_url,
        model: "tiny-model".into(),
        dialect,
        token: token.map(Secret::new),
        timeout: Duration::from_secs(5),
    })
}

fn params() -> DecodingParams {
    DecodingParams::for_task(TaskKind::Math)
}

#[test]
fn native_dialect_round_trip() {
    let (url, seen) = serve(vec![(200, json!({"text": "### Extracted Answer: 4"}).to_string())]);
    let m = client(url, Dialect::Native, Some("s3cret"));
    let p = params();
    let req = GenerationRequest { prompt: "2+2?", params: &p, test_id: Some("t1") };
    assert_eq!(m.complete(&req).unwrap(), "### Extracted Answer: 4");
    let seen = seen.lock().unwrap()[0].clone();
    assert_eq!(seen.path, "/generate");
    assert_eq!(seen.auth.as_deref(), Some("Bearer s3cret"));
    assert_eq!(
        seen.body,
        json!({"model": "tiny-model", "prompt": "2+2?", "temperature": 0.0, "max_new_tokens": 1024, "stop": ["\n### Question:"]})
    );
}

#[test]
fn openai_dialect_round_trip() {
    let (url, seen) = serve(vec![(200, json!({"choices": [{"text": "B"}]}).to_string())]);
    let m = client(url, Dialect::OpenaiCompletions, None);
    let p = params();
    let req = GenerationRequest { prompt: "q", params: &p, test_id: None };
    assert_eq!(m.complete(&req).unwrap(), "B");
    let seen = seen.lock().unwrap()[0].clone();
    assert_eq!(seen.path, "/v1/completions");
    assert_eq!(seen.auth, None);
    assert_eq!(seen.body["max_tokens"], json!(1024));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, json!({"text": "ok"}).to_string()),
    ]);
    let m = client(url, Dialect::Native, None);
    let p = params();
    let req = GenerationRequest { prompt: "q", params: &p, test_id: None };
    assert_eq!(generate(&m, &req, &RetryPolicy::immediate(3)).unwrap(), "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "bad".into()), (200, json!({"text": "ok"}).to_string())]);
    let m = client(url, Dialect::Native, None);
    let p = params();
    let req = GenerationRequest { prompt: "q", params: &p, test_id: None };
    match generate(&m, &req, &RetryPolicy::immediate(3)) {
        Err(InferenceError::Status { code: 400, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_reported() {
    let (url, _) = serve(vec![(200, json!({"output": "x"}).to_string())]);
    let m = client(url, Dialect::Native, None);
    let p = params();
    let req = GenerationRequest { prompt: "q", params: &p, test_id: None };
    assert!(matches!(m.complete(&req), Err(InferenceError::Malformed(_))));
}

#[test]
fn exhausted_retries_after_repeated_failures() {
    let (url, _) = serve(vec![(500, "a".into()), (500, "b".into())]);
    let m = client(url, Dialect::Native, None);
    let p = params();
    let req = GenerationRequest { prompt: "q", params: &p, test_id: None };
    match generate(&m, &req, &RetryPolicy::immediate(2)) {
        Err(InferenceError::Exhausted { attempts: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn token_never_appears_in_debug_output() {
    let m = client("http://127.0.0.1:9".into(), Dialect::Native, Some("s3cret"));
    assert!(!format!("{m:?}").contains("s3cret"));
}
