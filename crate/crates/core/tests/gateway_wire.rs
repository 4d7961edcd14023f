//! HTTP provider against a recording stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use moral_harness::gateway::{ChatProvider, GatewayError, HttpChatProvider};
use moral_harness::{ChatMessage, ChatRequest, ProviderConfig};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: String,
}

/// Serves the scripted (status, body) replies in order, one per connection.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                authorization: auth,
                body: String::from_utf8(buf).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn ok(content: &str) -> (u16, String) {
    (200, serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
}

fn provider(url: &str, env: &str) -> HttpChatProvider {
    let mut cfg = ProviderConfig::http("remote", url, "chat-model-1", 0.9, env);
    cfg.backoff_base_ms = 1;
    cfg.max_retries = 3;
    cfg.timeout_ms = 5_000;
    HttpChatProvider::new(cfg).unwrap()
}

fn request() -> ChatRequest {
    ChatRequest {
        messages: vec![ChatMessage::user("Is lying moral?"), ChatMessage::assistant("No."), ChatMessage::user("Why?")],
        temperature_override: None,
        tag: String::new(),
    }
}

#[test]
fn identical_requests_send_identical_payloads() {
    std::env::set_var("WIRE_TEST_KEY_A", "sk-test-a");
    let (url, seen) = stub(vec![ok("first"), ok("second")]);
    let p = provider(&url, "WIRE_TEST_KEY_A");
    assert_eq!(p.complete(&request()).unwrap().content, "first");
    assert_eq!(p.complete(&request().with_tag("other tag")).unwrap().content, "second");
    let seen = seen.lock().unwrap().clone();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].body, seen[1].body);
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test-a"));
    let v: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(v["model"], "chat-model-1");
    assert_eq!(v["temperature"], 0.9);
    assert_eq!(v["messages"].as_array().unwrap().len(), 3);
    assert_eq!(v["messages"][1]["role"], "assistant");
}

#[test]
fn retries_transient_failures_then_succeeds() {
    std::env::set_var("WIRE_TEST_KEY_B", "sk-test-b");
    let (url, seen) = stub(vec![(500, "{}".into()), (429, "{}".into()), ok("done")]);
    let r = provider(&url, "WIRE_TEST_KEY_B").complete(&request()).unwrap();
    assert_eq!(r.content, "done");
    assert_eq!(r.attempt_count, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn unauthorized_fails_without_retry() {
    std::env::set_var("WIRE_TEST_KEY_C", "sk-test-c");
    let (url, seen) = stub(vec![(401, "{}".into()), ok("never")]);
    let err = provider(&url, "WIRE_TEST_KEY_C").complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Auth { .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn missing_credential_fails_before_any_call() {
    let (url, seen) = stub(vec![ok("never")]);
    let err = provider(&url, "WIRE_TEST_KEY_UNSET").complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Auth { .. }), "{err:?}");
    assert!(!err.to_string().contains("sk-"));
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn malformed_reply_is_reported() {
    std::env::set_var("WIRE_TEST_KEY_D", "sk-test-d");
    let (url, _) = stub(vec![(200, "{\"choices\": []}".into())]);
    let err = provider(&url, "WIRE_TEST_KEY_D").complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Malformed { .. }), "{err:?}");
}

#[test]
fn retries_exhausted_reports_last_failure() {
    std::env::set_var("WIRE_TEST_KEY_E", "sk-test-e");
    let (url, seen) = stub(vec![(503, "{}".into()); 4]);
    let err = provider(&url, "WIRE_TEST_KEY_E").complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 4, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 4);
}
