//! The HTTP backend against an in-process fake bridge.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use metaeol::backend::{Backend, BackendError, HttpBackend, HttpConfig, PromptError};
use metaeol::embed::{EmbedConfig, Embedder};
use metaeol::prompts::Registry;
use serde_json::{json, Value};

const CONTEXT_LIMIT: usize = 64;

#[derive(Default)]
struct Fake {
    info_calls: AtomicUsize,
    fail_info_first: bool,
    top_k_missing: bool,
    batches: Mutex<Vec<Vec<String>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, String, String)> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((method, path, String::from_utf8(body).ok()?))
}

/// Hidden state the fake returns: [prompt length, layer, 0.1].
fn fake_vector(prompt: &str, layer: i64) -> Value {
    json!([prompt.len() as f64, layer as f64, 0.1])
}

fn respond(fake: &Fake, method: &str, path: &str, body: &str) -> (u16, Value) {
    match (method, path) {
        ("GET", "/v1/info") => {
            if fake.fail_info_first && fake.info_calls.fetch_add(1, Ordering::SeqCst) == 0 {
                return (503, json!({"error": "loading"}));
            }
            (
                200,
                json!({"model_id": "fake-bridge", "num_layers": 4, "hidden_dim": 3}),
            )
        }
        ("POST", "/v1/hidden_states") => {
            let req: Value = serde_json::from_str(body).unwrap();
            let prompts: Vec<String> = serde_json::from_value(req["prompts"].clone()).unwrap();
            let layer = req["layer_index"].as_i64().unwrap();
            fake.batches.lock().unwrap().push(prompts.clone());
            if !(-4..=-1).contains(&layer) {
                return (400, json!({"error": "bad layer"}));
            }
            let errors: Vec<Value> = prompts
                .iter()
                .enumerate()
                .filter(|(_, p)| p.len() > CONTEXT_LIMIT)
                .map(|(i, p)| json!({"index": i, "error": format!("{} tokens > {CONTEXT_LIMIT}", p.len())}))
                .collect();
            if !errors.is_empty() {
                return (422, json!({"error": "context_overflow", "prompt_errors": errors}));
            }
            let vectors: Vec<Value> = prompts.iter().map(|p| fake_vector(p, layer)).collect();
            (200, json!({"dim": 3, "vectors": vectors}))
        }
        ("POST", "/v1/topk") if !fake.top_k_missing => {
            let req: Value = serde_json::from_str(body).unwrap();
            let k = req["k"].as_u64().unwrap() as usize;
            let all = [("the", 0.5), ("good", 0.25), ("\u{2581}a", 0.125)];
            let entries: Vec<Value> = all.iter().take(k).map(|(t, p)| json!({"token": t, "p": p})).collect();
            (200, json!({ "entries": entries }))
        }
        _ => (404, json!({"error": "not found"})),
    }
}

fn serve(fake: Fake) -> (String, Arc<Fake>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let fake = Arc::new(fake);
    let shared = Arc::clone(&fake);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some((method, path, body)) = read_request(&mut stream) else {
                continue;
            };
            let (status, value) = respond(&shared, &method, &path, &body);
            let payload = value.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, fake)
}

fn client(url: &str) -> HttpBackend {
    HttpBackend::new(HttpConfig {
        base_url: url.to_string(),
        timeout_ms: 5_000,
        retries: 2,
    })
    .unwrap()
}

#[test]
fn info_retries_through_503() {
    let (url, fake) = serve(Fake {
        fail_info_first: true,
        ..Fake::default()
    });
    let info = client(&url).info().unwrap();
    assert_eq!(
        (info.model_id.as_str(), info.num_layers, info.hidden_dim),
        ("fake-bridge", 4, 3)
    );
    assert_eq!(fake.info_calls.load(Ordering::SeqCst), 2);
}

#[test]
fn hidden_states_parse_to_f32() {
    let (url, _) = serve(Fake::default());
    let backend = client(&url);
    let states = backend.hidden_states(&["ab".into(), "abc".into()], -2).unwrap();
    assert_eq!(states[0].as_ref().unwrap(), &vec![2.0f32, -2.0, 0.1]);
    assert_eq!(states[1].as_ref().unwrap()[2].to_bits(), 0.1f32.to_bits());
}

#[test]
fn overflowing_prompts_are_reported_and_the_rest_resent() {
    let (url, fake) = serve(Fake::default());
    let backend = client(&url);
    let long = "x".repeat(CONTEXT_LIMIT + 1);
    let prompts = vec!["short".to_string(), long.clone(), "tiny".to_string()];
    let states = backend.hidden_states(&prompts, -1).unwrap();
    assert!(states[0].is_ok() && states[2].is_ok());
    assert!(matches!(&states[1], Err(PromptError::ContextOverflow { .. })));
    let batches = fake.batches.lock().unwrap();
    assert_eq!(batches.len(), 2);
    assert_eq!(batches[1], vec!["short".to_string(), "tiny".to_string()]);
}

#[test]
fn bad_layer_is_a_protocol_error() {
    let (url, _) = serve(Fake::default());
    assert!(matches!(
        client(&url).hidden_states(&["a".into()], -9),
        Err(BackendError::Protocol(_))
    ));
}

#[test]
fn top_k_and_missing_endpoint() {
    let (url, _) = serve(Fake::default());
    let pred = client(&url).top_k("p", 2).unwrap();
    assert_eq!(pred.entries.len(), 2);
    assert_eq!(pred.entries[0].token, "the");
    let (url, _) = serve(Fake {
        top_k_missing: true,
        ..Fake::default()
    });
    assert!(matches!(client(&url).top_k("p", 2), Err(BackendError::NotSupported(_))));
}

#[test]
fn nothing_listening_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(HttpConfig {
        base_url: format!("http://127.0.0.1:{port}"),
        timeout_ms: 1_000,
        retries: 0,
    })
    .unwrap();
    assert!(matches!(backend.info(), Err(BackendError::Unavailable(_))));
}

#[test]
fn embedder_over_http() {
    let (url, _) = serve(Fake::default());
    let backend = client(&url);
    let registry = Registry::builtin();
    let config = EmbedConfig {
        prompt_set: "eol".into(),
        layer: "-3".parse().unwrap(),
        ..EmbedConfig::default()
    };
    let embedder = Embedder::new(&backend, &registry, config, None).unwrap();
    let sentence = "hi";
    let prompt = registry.template("eol-base").unwrap().render(sentence);
    let values = embedder.embed_sentence(sentence).unwrap().embedding.values;
    assert_eq!(values, vec![prompt.len() as f32, -3.0, 0.1]);
}
