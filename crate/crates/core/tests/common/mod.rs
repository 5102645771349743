#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use reagan::graph::{load_graph, load_split_file, TextAttributedGraph};
use reagan::retrieval::{EmbedError, EmbeddingProvider, EmbeddingVector};
use reagan::Scalar;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

/// Loads `<dir>/nodes.jsonl` + `edges_file` with the split file of `dir`.
pub fn fixture(dir: &str, edges_file: &str) -> TextAttributedGraph {
    let d = data_dir().join(dir);
    let g = load_graph(&d.join("nodes.jsonl"), &d.join(edges_file)).expect("fixture loads");
    let splits = load_split_file(&g, &d.join("splits.jsonl")).expect("splits load");
    g.with_splits(&splits).expect("splits partition")
}

/// Counts occurrences of each vocabulary group among whitespace tokens; dimension i
/// is the count for group i. Easy to trace by hand.
pub struct KeywordEmbedder {
    pub groups: Vec<Vec<&'static str>>,
}

impl KeywordEmbedder {
    pub fn new(groups: &[&[&'static str]]) -> Self {
        Self { groups: groups.iter().map(|g| g.to_vec()).collect() }
    }

    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.groups.len()];
        for tok in text.split_whitespace() {
            for (i, g) in self.groups.iter().enumerate() {
                if g.contains(&tok) {
                    v[i] += 1.0;
                }
            }
        }
        v
    }
}

impl<T: Scalar> EmbeddingProvider<T> for KeywordEmbedder {
    fn dim(&self) -> usize {
        self.groups.len()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                EmbeddingVector::from_f64(&self.counts(t))
                    .map_err(|e| EmbedError::Malformed(format!("{t:?}: {e}")))
            })
            .collect()
    }
}

/// Prints one PASS/FAIL line for an acceptance criterion and fails the test on FAIL.
pub fn criterion(id: &str, name: &str, limit: Option<Duration>, body: impl FnOnce() -> Result<String, String>) {
    let started = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body));
    let elapsed = started.elapsed();
    let outcome = match result {
        Ok(Ok(detail)) => match limit {
            Some(l) if elapsed > l => Err(format!("took {elapsed:?}, limit {l:?}")),
            _ => Ok(detail),
        },
        Ok(Err(e)) => Err(e),
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    // written to the stdout handle rather than through print!, which the test
    // harness captures for passing tests
    let line = match &outcome {
        Ok(detail) => format!("PASS criterion {id} ({name}) in {elapsed:.2?}: {detail}"),
        Err(e) => format!("FAIL criterion {id} ({name}) in {elapsed:.2?}: {e}"),
    };
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    if let Err(e) = outcome {
        panic!("criterion {id} failed: {e}");
    }
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// What the stub server does with each incoming request, by arrival order (0-based).
pub type Responder = dyn Fn(usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server recording request bodies and peak concurrency.
pub struct StubServer {
    pub url: String,
    pub bodies: Arc<Mutex<Vec<String>>>,
    pub peak: Arc<AtomicUsize>,
    pub requests: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start(delay: Duration, responder: Arc<Responder>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let peak = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(AtomicUsize::new(0));
        let live = Arc::new(AtomicUsize::new(0));
        let (b, p, r) = (bodies.clone(), peak.clone(), requests.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (b, p, r, live, responder) = (b.clone(), p.clone(), r.clone(), live.clone(), responder.clone());
                std::thread::spawn(move || serve(stream, delay, &b, &p, &r, &live, &*responder));
            }
        });
        Self { url, bodies, peak, requests }
    }
}

fn serve(
    stream: TcpStream,
    delay: Duration,
    bodies: &Mutex<Vec<String>>,
    peak: &AtomicUsize,
    requests: &AtomicUsize,
    live: &AtomicUsize,
    responder: &Responder,
) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut writer = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut len = 0usize;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let now = live.fetch_add(1, Ordering::SeqCst) + 1;
        peak.fetch_max(now, Ordering::SeqCst);
        let index = requests.fetch_add(1, Ordering::SeqCst);
        bodies.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
        std::thread::sleep(delay);
        let (status, payload) = responder(index);
        live.fetch_sub(1, Ordering::SeqCst);
        let resp = format!(
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if writer.write_all(resp.as_bytes()).is_err() {
            return;
        }
    }
}

pub fn completion_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
    })
    .to_string()
}
