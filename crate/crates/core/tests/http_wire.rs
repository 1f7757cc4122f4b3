use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use hallucheck_core::llm::{BackendConfig, BackendKind, CompletionBackend, GatewayError, HttpCompletionBackend, LlmGateway};
use hallucheck_core::nli::{build_nli_input, HttpNliScorer, NliBackendConfig, NliBackendKind, NliError, NliScorer};
use hallucheck_core::prompting::PromptRendering;
use hallucheck_core::DecodingParams;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Request {
    method: String,
    path: String,
    headers: Vec<(String, String)>,
    body: String,
}

impl Request {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
    fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap()
    }
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

/// One-request-per-connection HTTP server on an ephemeral port.
struct FakeServer {
    url: String,
    log: Arc<Mutex<Vec<Request>>>,
}

impl FakeServer {
    fn start(handler: impl Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log2 = log.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or_default().to_owned();
                let path = parts.next().unwrap_or_default().to_owned();
                let mut headers = Vec::new();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        headers.push((k.trim().to_owned(), v.trim().to_owned()));
                    }
                }
                let len = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .map_or(0, |(_, v)| v.parse().unwrap());
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req = Request {
                    method,
                    path,
                    headers,
                    body: String::from_utf8(body).unwrap(),
                };
                let n = {
                    let mut l = log2.lock().unwrap();
                    l.push(req.clone());
                    l.len() - 1
                };
                let (status, body) = handler(&req, n);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        Self { url, log }
    }

    fn requests(&self) -> Vec<Request> {
        self.log.lock().unwrap().clone()
    }
}

fn llm_config(url: &str, env: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::HttpCompletion,
        endpoint_url: Some(url.to_owned()),
        model_name: "test-model".into(),
        auth_env_var: env.into(),
        max_in_flight: 2,
        timeout_ms: 2_000,
        retry_limit: 2,
        mock_path: None,
    }
}

fn choice(text: &str, lps: Value) -> Value {
    json!({"index": 0, "text": text, "logprobs": {"token_logprobs": lps}, "finish_reason": "stop"})
}

fn prompt(text: &str) -> PromptRendering {
    PromptRendering {
        text: text.into(),
        expression_id: None,
        question_id: "q".into(),
    }
}

#[test]
fn completion_request_shape_and_auth() {
    std::env::set_var("HALLUCHECK_WIRE_TOKEN", "sekrit");
    let server = FakeServer::start(|_, _| (200, json!({"choices": [choice(" Paris", json!([-0.1, -0.3]))]}).to_string()));
    let backend = Arc::new(HttpCompletionBackend::new(&llm_config(&server.url, "HALLUCHECK_WIRE_TOKEN")).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let gw = LlmGateway::open(backend, dir.path(), 2).unwrap();

    let g = gw.complete(&prompt("Question: q\nAnswer:"), &DecodingParams::greedy(32)).unwrap();
    assert_eq!(g.text, " Paris");
    assert_eq!(g.token_logprobs, Some(vec![-0.1, -0.3]));
    gw.complete(&prompt("Question: q\nAnswer:"), &DecodingParams::greedy(32)).unwrap();

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    let r = &reqs[0];
    assert_eq!((r.method.as_str(), r.path.as_str()), ("POST", "/completions"));
    assert_eq!(r.header("authorization"), Some("Bearer sekrit"));
    assert_eq!(
        r.json(),
        json!({"model": "test-model", "prompt": "Question: q\nAnswer:", "temperature": 0.0, "max_tokens": 32, "logprobs": 1, "n": 1})
    );
}

#[test]
fn sampled_request_asks_for_n_and_null_logprob_drops_list() {
    let server = FakeServer::start(|req, _| {
        let n = req.json()["n"].as_u64().unwrap();
        let choices: Vec<Value> = (0..n)
            .map(|i| {
                let mut c = choice(&format!(" s{i}"), json!([-0.2, null]));
                c["index"] = json!(i);
                c
            })
            .collect();
        (200, json!({ "choices": choices }).to_string())
    });
    let backend = HttpCompletionBackend::new(&llm_config(&server.url, "HALLUCHECK_UNSET_VAR")).unwrap();
    let out = backend
        .generate("p", &DecodingParams::sampling(0.5, 8, 16), &(0..8).collect::<Vec<_>>())
        .unwrap();
    assert_eq!(out.len(), 8);
    assert_eq!(out[3].text, " s3");
    assert!(out.iter().all(|c| c.token_logprobs.is_none()));
    let r = &server.requests()[0];
    assert_eq!(r.json()["n"], 8);
    assert_eq!(r.json()["temperature"], 0.5);
    assert_eq!(r.header("authorization"), None);
}

#[test]
fn server_errors_are_retried_then_reported() {
    let server = FakeServer::start(|_, n| {
        if n == 0 {
            (503, "{}".into())
        } else {
            (200, json!({"choices": [choice(" ok", json!([-0.5]))]}).to_string())
        }
    });
    let backend = HttpCompletionBackend::new(&llm_config(&server.url, "HALLUCHECK_UNSET_VAR")).unwrap();
    let out = backend.generate("p", &DecodingParams::greedy(8), &[0]).unwrap();
    assert_eq!(out[0].text, " ok");
    assert_eq!(server.requests().len(), 2);

    let down = FakeServer::start(|_, _| (500, "{}".into()));
    let backend = HttpCompletionBackend::new(&llm_config(&down.url, "HALLUCHECK_UNSET_VAR")).unwrap();
    match backend.generate("p", &DecodingParams::greedy(8), &[0]) {
        Err(GatewayError::BackendUnreachable { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(down.requests().len(), 3);
}

#[test]
fn slow_server_times_out_and_garbage_is_malformed() {
    let slow = FakeServer::start(|_, _| {
        thread::sleep(Duration::from_millis(600));
        (200, "{}".into())
    });
    let mut cfg = llm_config(&slow.url, "HALLUCHECK_UNSET_VAR");
    cfg.timeout_ms = 150;
    cfg.retry_limit = 0;
    let backend = HttpCompletionBackend::new(&cfg).unwrap();
    assert!(matches!(
        backend.generate("p", &DecodingParams::greedy(8), &[0]),
        Err(GatewayError::Timeout { attempts: 1 })
    ));

    let junk = FakeServer::start(|_, _| (200, "not json".into()));
    let backend = HttpCompletionBackend::new(&llm_config(&junk.url, "HALLUCHECK_UNSET_VAR")).unwrap();
    assert!(matches!(
        backend.generate("p", &DecodingParams::greedy(8), &[0]),
        Err(GatewayError::MalformedReply(_))
    ));
}

#[test]
fn unreachable_endpoint() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = llm_config(&url, "HALLUCHECK_UNSET_VAR");
    cfg.retry_limit = 0;
    let backend = HttpCompletionBackend::new(&cfg).unwrap();
    assert!(matches!(
        backend.generate("p", &DecodingParams::greedy(8), &[0]),
        Err(GatewayError::BackendUnreachable { attempts: 1, .. })
    ));
}

fn nli_config(url: &str, max_batch: usize) -> NliBackendConfig {
    NliBackendConfig {
        kind: NliBackendKind::Http,
        endpoint_url: Some(url.to_owned()),
        mock_path: None,
        max_in_flight: 2,
        timeout_ms: 2_000,
        retry_limit: 1,
        max_batch,
        join: " ".into(),
    }
}

/// Sidecar stand-in: entailment logit is the pair index, so order is
/// observable.
fn sidecar(version_after: Option<(usize, &'static str)>) -> FakeServer {
    FakeServer::start(move |req, n| {
        if req.path == "/healthz" {
            return (200, json!({"model_version": "deberta-test"}).to_string());
        }
        let version = match version_after {
            Some((k, v)) if n > k => v,
            _ => "deberta-test",
        };
        let pairs = req.json()["pairs"].as_array().unwrap().clone();
        let verdicts: Vec<Value> = pairs
            .iter()
            .map(|p| {
                let i: f64 = p["text_b"].as_str().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
                json!({"entailment": i, "neutral": 0.0, "contradiction": -i})
            })
            .collect();
        (200, json!({"model_version": version, "verdicts": verdicts}).to_string())
    })
}

fn inputs(n: usize) -> Vec<hallucheck_core::nli::NliInput> {
    (0..n)
        .map(|i| build_nli_input("Where?", "Paris", &format!("answer {i}")).unwrap())
        .collect()
}

#[test]
fn sidecar_batch_of_32_round_trips() {
    let server = sidecar(None);
    let scorer = HttpNliScorer::connect(&nli_config(&server.url, 32)).unwrap();
    assert_eq!(scorer.model_version(), "deberta-test");
    let v = scorer.score_pairs(&inputs(32)).unwrap();
    assert_eq!(v.len(), 32);
    for (i, verdict) in v.iter().enumerate() {
        assert_eq!(verdict.logit_entailment, i as f64);
        assert_eq!(verdict.logit_contradiction, -(i as f64));
    }
    let reqs = server.requests();
    assert_eq!(reqs.len(), 2);
    assert_eq!(reqs[0].path, "/healthz");
    assert_eq!(reqs[0].method, "GET");
    let body = reqs[1].json();
    assert_eq!(reqs[1].path, "/v1/nli");
    assert_eq!(body["pairs"].as_array().unwrap().len(), 32);
    assert_eq!(body["pairs"][5], json!({"text_a": "Where? Paris", "text_b": "Where? answer 5"}));
}

#[test]
fn sidecar_requests_are_chunked_by_max_batch() {
    let server = sidecar(None);
    let scorer = HttpNliScorer::connect(&nli_config(&server.url, 10)).unwrap();
    let v = scorer.score_pairs(&inputs(32)).unwrap();
    assert_eq!(v[31].logit_entailment, 31.0);
    let sizes: Vec<usize> = server.requests()[1..]
        .iter()
        .map(|r| r.json()["pairs"].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, [10, 10, 10, 2]);
}

#[test]
fn sidecar_version_change_mid_run_is_an_error() {
    let server = sidecar(Some((1, "deberta-other")));
    let scorer = HttpNliScorer::connect(&nli_config(&server.url, 4)).unwrap();
    assert!(scorer.score_pairs(&inputs(4)).is_ok());
    assert!(matches!(scorer.score_pairs(&inputs(4)), Err(NliError::MalformedScorerReply(_))));
}

#[test]
fn sidecar_health_variants() {
    let plain = FakeServer::start(|_, _| (200, "plain-version\n".into()));
    assert_eq!(
        HttpNliScorer::connect(&nli_config(&plain.url, 4)).unwrap().model_version(),
        "plain-version"
    );
    let loading = FakeServer::start(|_, _| (503, "{}".into()));
    assert!(matches!(
        HttpNliScorer::connect(&nli_config(&loading.url, 4)),
        Err(NliError::ScorerUnreachable(_))
    ));
}
