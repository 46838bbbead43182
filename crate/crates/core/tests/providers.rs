use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use qembed::providers::{
    cached, remote_llm, AnswerCache, AnswerRecord, DecodeParams, LlmError, LlmProvider, PromptCache, RemoteLimits,
};
use tiny_http::{Header, Response, Server};

const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"1. yes"}}]}"#;

fn limits(retries: u32, max_parallel: usize) -> RemoteLimits {
    RemoteLimits {
        max_parallel,
        retries,
        backoff_ms: 1,
        timeout_secs: 10,
    }
}

/// Serves `statuses` in order (repeating the last one), counting requests.
fn serve(statuses: Vec<u16>) -> (String, Arc<AtomicUsize>) {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    thread::spawn(move || {
        for req in server.incoming_requests() {
            let i = seen.fetch_add(1, Ordering::SeqCst);
            let status = statuses[i.min(statuses.len() - 1)];
            let body = if status == 200 { OK_BODY } else { "nope" };
            let _ = req.respond(Response::from_string(body).with_status_code(status));
        }
    });
    (url, hits)
}

#[test]
fn transient_failures_are_retried() {
    let (url, hits) = serve(vec![500, 500, 200]);
    let llm = remote_llm(&url, "m", "k", limits(3, 1)).unwrap();
    assert_eq!(llm.complete("q", &DecodeParams::answering()).unwrap(), "1. yes");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, hits) = serve(vec![503]);
    let llm = remote_llm(&url, "m", "k", limits(2, 1)).unwrap();
    match llm.complete("q", &DecodeParams::answering()) {
        Err(LlmError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected a transport error, got {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn auth_failures_are_not_retried() {
    let (url, hits) = serve(vec![401]);
    let llm = remote_llm(&url, "m", "k", limits(4, 1)).unwrap();
    assert!(matches!(llm.complete("q", &DecodeParams::answering()), Err(LlmError::Auth(_))));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = serve(vec![400]);
    let llm = remote_llm(&url, "m", "k", limits(4, 1)).unwrap();
    assert!(matches!(
        llm.complete("q", &DecodeParams::answering()),
        Err(LlmError::Rejected { status: 400, .. })
    ));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn request_carries_model_and_credentials() {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", server.server_addr().to_ip().unwrap());
    let captured = Arc::new(Mutex::new(None));
    let slot = captured.clone();
    thread::spawn(move || {
        let mut req = server.recv().unwrap();
        let mut body = String::new();
        req.as_reader().read_to_string(&mut body).unwrap();
        let auth = req
            .headers()
            .iter()
            .find(|h| h.field.equiv("Authorization"))
            .map(|h| h.value.to_string());
        *slot.lock().unwrap() = Some((auth, body));
        let json = Header::from_bytes("Content-Type", "application/json").unwrap();
        req.respond(Response::from_string(OK_BODY).with_header(json)).unwrap();
    });
    let llm = remote_llm(&url, "tiny-model", "sekrit", limits(0, 1)).unwrap();
    llm.complete("hello", &DecodeParams::answering()).unwrap();
    let (auth, body) = captured.lock().unwrap().take().unwrap();
    assert_eq!(auth.as_deref(), Some("Bearer sekrit"));
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["model"], "tiny-model");
    assert_eq!(v["messages"][0]["content"], "hello");
    assert_eq!(v["temperature"], 0.0);
}

#[test]
fn parallelism_is_bounded() {
    let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}/", server.server_addr().to_ip().unwrap());
    let current = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    for _ in 0..6 {
        let (server, current, peak) = (server.clone(), current.clone(), peak.clone());
        thread::spawn(move || {
            for req in server.incoming_requests() {
                let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                thread::sleep(Duration::from_millis(30));
                current.fetch_sub(1, Ordering::SeqCst);
                let _ = req.respond(Response::from_string(OK_BODY));
            }
        });
    }
    let llm = Arc::new(remote_llm(&url, "m", "k", limits(0, 2)).unwrap());
    let workers: Vec<_> = (0..8)
        .map(|i| {
            let llm = llm.clone();
            thread::spawn(move || llm.complete(&format!("q{i}"), &DecodeParams::answering()).unwrap())
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let peak = peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak concurrency {peak}");
}

struct Counting(AtomicUsize);

impl LlmProvider for Counting {
    fn complete(&self, prompt: &str, _: &DecodeParams) -> Result<String, LlmError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(format!("echo {prompt}"))
    }
}

#[test]
fn prompt_cache_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("llm.jsonl");
    let first = cached(Counting(AtomicUsize::new(0)), PromptCache::open(&path).unwrap());
    let p = DecodeParams::answering();
    assert_eq!(first.complete("a", &p).unwrap(), "echo a");
    assert_eq!(first.complete("a", &p).unwrap(), "echo a");
    first.complete("b", &p).unwrap();
    drop(first);

    let inner = Arc::new(Counting(AtomicUsize::new(0)));
    let second = cached(inner.clone(), PromptCache::open(&path).unwrap());
    assert_eq!(second.cache().len(), 2);
    assert_eq!(second.complete("a", &p).unwrap(), "echo a");
    assert_eq!(second.complete("b", &p).unwrap(), "echo b");
    assert_eq!(inner.0.load(Ordering::SeqCst), 0);
    second.complete("c", &p).unwrap();
    assert_eq!(inner.0.load(Ordering::SeqCst), 1);
}

#[test]
fn concurrent_identical_prompts_go_upstream_once() {
    let inner = Arc::new(Counting(AtomicUsize::new(0)));
    let llm = Arc::new(cached(inner.clone(), PromptCache::in_memory()));
    let workers: Vec<_> = (0..8)
        .map(|_| {
            let llm = llm.clone();
            thread::spawn(move || llm.complete("same", &DecodeParams::answering()).unwrap())
        })
        .collect();
    for w in workers {
        assert_eq!(w.join().unwrap(), "echo same");
    }
    assert_eq!(inner.0.load(Ordering::SeqCst), 1);
}

#[test]
fn answer_cache_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("answers.jsonl");
    let rec = |q: usize, d: &str, a: bool| AnswerRecord {
        question_id: q,
        document_id: d.into(),
        answer: a,
        prompt_fingerprint: format!("{q}{d}"),
    };
    let cache = AnswerCache::open(&path).unwrap();
    cache.insert_all(&[rec(0, "d1", true), rec(1, "d1", false)]).unwrap();
    cache.insert_all(&[rec(0, "d1", false)]).unwrap();
    drop(cache);

    let cache = AnswerCache::open(&path).unwrap();
    assert_eq!(cache.len(), 2);
    assert_eq!(cache.get(0, "d1"), Some(false));
    assert_eq!(cache.get(1, "d1"), Some(false));
    assert_eq!(cache.get(2, "d1"), None);
}
