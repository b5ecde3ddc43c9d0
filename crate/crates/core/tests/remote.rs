//! Chat-completions client against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use latent_lab::envs::{sample_expert_stream, Regime};
use latent_lab::error::Error;
use latent_lab::protocol::{
    run_protocol_episode, write_traces, Framing, HistoryMode, Message, NoteState, ProtocolSpec, RemoteEndpointConfig,
    RemotePredictor, Role, API_KEY_VAR,
};

const KEY: &str = "sk-test-7f3a9c";

enum Script {
    Reply(String),
    Stall(Duration),
    Status(u16),
}

struct Seen {
    head: String,
    body: String,
}

fn read_request(stream: &mut TcpStream) -> Seen {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut head = String::new();
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        head.push_str(&line);
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    Seen { head, body: String::from_utf8(body).unwrap() }
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Serve one scripted action per connection; report every request seen.
fn stub(script: Vec<Script>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for action in script {
            let (mut stream, _) = listener.accept().unwrap();
            let seen = read_request(&mut stream);
            let _ = tx.send(seen);
            match action {
                Script::Stall(d) => thread::sleep(d),
                Script::Status(code) => {
                    let resp = format!("HTTP/1.1 {code} Error\r\ncontent-length: 0\r\nconnection: close\r\n\r\n");
                    let _ = stream.write_all(resp.as_bytes());
                }
                Script::Reply(body) => {
                    let resp = format!(
                        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                }
            }
        }
    });
    (url, rx)
}

fn config(url: String) -> RemoteEndpointConfig {
    let mut c = RemoteEndpointConfig::new(url, "stub-model");
    c.timeout_secs = 0.5;
    c.backoff_ms = 10;
    c.max_retries = 2;
    c
}

fn messages() -> Vec<Message> {
    vec![
        Message { role: Role::System, content: "system".into() },
        Message { role: Role::User, content: "{\"turn_type\": \"prediction\"}".into() },
    ]
}

#[test]
fn happy_path_parses_the_label() {
    let (url, rx) = stub(vec![Script::Reply(completion("{\"prediction\": 1}"))]);
    let p = RemotePredictor::with_key(config(url), KEY.into()).unwrap();
    let reply = p.complete(&messages()).unwrap();
    assert_eq!(reply.text, "{\"prediction\": 1}");
    assert_eq!(reply.attempts, 1);
    let seen = rx.recv().unwrap();
    assert!(seen.head.contains(&format!("Bearer {KEY}")));
    let body: serde_json::Value = serde_json::from_str(&seen.body).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert!(body.get("tools").is_none());
}

#[test]
fn timeout_then_success_counts_two_attempts() {
    let (url, _rx) = stub(vec![
        Script::Stall(Duration::from_millis(700)),
        Script::Reply(completion("{\"prediction\": 0}")),
    ]);
    let p = RemotePredictor::with_key(config(url), KEY.into()).unwrap();
    let reply = p.complete(&messages()).unwrap();
    assert_eq!(reply.attempts, 2);
    assert_eq!(reply.text, "{\"prediction\": 0}");
}

#[test]
fn server_errors_are_retried_and_client_errors_are_not() {
    let (url, _rx) = stub(vec![Script::Status(503), Script::Status(429), Script::Reply(completion("{\"prediction\": 1}"))]);
    let p = RemotePredictor::with_key(config(url), KEY.into()).unwrap();
    assert_eq!(p.complete(&messages()).unwrap().attempts, 3);

    let (url, rx) = stub(vec![Script::Status(401), Script::Reply(completion("{\"prediction\": 1}"))]);
    let p = RemotePredictor::with_key(config(url), KEY.into()).unwrap();
    let err = p.complete(&messages()).unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    assert!(!err.to_string().contains(KEY));
    assert_eq!(rx.try_iter().count(), 1);
}

#[test]
fn exhausted_retries_are_a_transport_error() {
    let stall = || Script::Stall(Duration::from_millis(700));
    let (url, _rx) = stub(vec![stall(), stall(), stall()]);
    let p = RemotePredictor::with_key(config(url), KEY.into()).unwrap();
    assert!(matches!(p.complete(&messages()), Err(Error::Transport(_))));
}

#[test]
fn prose_reply_triggers_the_fallback_and_secrets_stay_out_of_traces() {
    let stream = sample_expert_stream(Regime::Stratified, 4, 2, 9).unwrap();
    let (url, _rx) = stub(vec![
        Script::Reply(completion("Expert A looks right, so I would say one.")),
        Script::Reply(completion("{\"prediction\": 0}")),
    ]);
    let spec = ProtocolSpec { framing: Framing::Online, state: NoteState::NoNote, history: HistoryMode::Retained };
    let mut p = RemotePredictor::with_key(config(url), KEY.into()).unwrap();
    let ep = run_protocol_episode(&spec, &mut p, &stream).unwrap();
    assert!(ep.turns[0].parse_failure);
    assert_eq!(ep.turns[0].fallback.as_deref(), Some("majority_vote"));
    assert_eq!(ep.parse_failures, 1);
    assert_eq!(ep.predictions[1], 0);
    assert!(ep.turns[0].elapsed_ms.is_some());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    write_traces(&path, &ep.turns).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), ep.turns.len());
    assert!(!text.contains(KEY));
    assert!(!serde_json::to_string(&ep).unwrap().contains(KEY));
}

#[test]
fn credential_comes_from_the_environment() {
    std::env::remove_var(API_KEY_VAR);
    let cfg = RemoteEndpointConfig::new("http://127.0.0.1:9/v1/chat/completions", "m");
    assert!(matches!(RemotePredictor::from_env(cfg.clone()), Err(Error::Config(_))));
    std::env::set_var(API_KEY_VAR, KEY);
    let p = RemotePredictor::from_env(cfg).unwrap();
    assert!(!format!("{p:?}").contains(KEY));
    std::env::remove_var(API_KEY_VAR);
}
