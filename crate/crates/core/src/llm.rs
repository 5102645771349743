//! Access to a frozen chat model.
//!
//! Three backends implement [`LlmBackend`]:
//! - [`HttpBackend`] speaks the chat-completions protocol with retries and a shared
//!   in-flight cap,
//! - [`ScriptedBackend`] answers from a [`ScriptedPolicy`] and is a pure function of
//!   the request,
//! - [`ReplayBackend`] answers from a recorded transcript.
//!
//! [`RecordingBackend`] wraps any of them and captures a replayable transcript.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::NodeId;

pub const API_KEY_ENV: &str = "REAGAN_LLM_API_KEY";
pub const DEFAULT_MODEL: &str = "Qwen2.5-14B-Instruct";
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;
pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
    #[error("malformed response body: {0}")]
    MalformedResponseBody(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("empty request text")]
    EmptyRequest,
    #[error("no recorded response for {0}")]
    ReplayMiss(String),
    #[error("recorded prompt for {0} differs from the current prompt")]
    ReplayMismatch(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LlmError {
    fn is_transient(&self) -> bool {
        match self {
            Self::Timeout | Self::Transport(_) => true,
            Self::HttpStatus(code) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Plan,
    Predict,
    Reask,
    Summarize,
    Compress,
}

impl Purpose {
    fn as_str(self) -> &'static str {
        match self {
            Self::Plan => "plan",
            Self::Predict => "predict",
            Self::Reask => "reask",
            Self::Summarize => "summarize",
            Self::Compress => "compress",
        }
    }
}

/// Identifies a request for logs, transcripts and replay: node, layer and purpose.
///
/// Renders as `node=<id>/layer=<l>/<purpose>`. `seq` disambiguates several requests
/// of the same purpose within one node-layer step and is omitted when zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestTag {
    pub node: NodeId,
    pub layer: usize,
    pub purpose: Purpose,
    pub seq: usize,
}

impl RequestTag {
    pub fn new(node: NodeId, layer: usize, purpose: Purpose) -> Self {
        Self {
            node,
            layer,
            purpose,
            seq: 0,
        }
    }

    pub fn with_seq(mut self, seq: usize) -> Self {
        self.seq = seq;
        self
    }
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node={}/layer={}/{}", self.node, self.layer, self.purpose.as_str())?;
        if self.seq > 0 {
            write!(f, "/{}", self.seq)?;
        }
        Ok(())
    }
}

impl FromStr for RequestTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed request tag {s:?}");
        let parts: Vec<&str> = s.split('/').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let node = parts[0].strip_prefix("node=").and_then(|v| v.parse().ok());
        let layer = parts[1].strip_prefix("layer=").and_then(|v| v.parse().ok());
        let purpose = serde_json::from_value(serde_json::Value::String(parts[2].into())).ok();
        let seq = match parts.get(3) {
            Some(v) => v.parse().ok(),
            None => Some(0),
        };
        match (node, layer, purpose, seq) {
            (Some(node), Some(layer), Some(purpose), Some(seq)) => Ok(Self {
                node,
                layer,
                purpose,
                seq,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for RequestTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RequestTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub tag: RequestTag,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>, tag: RequestTag) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: 0.0,
            tag,
        }
    }

    pub fn with_max_output_tokens(mut self, tokens: u32) -> Self {
        self.max_output_tokens = tokens;
        self
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.system_text.trim().is_empty() || self.user_text.trim().is_empty() {
            return Err(LlmError::EmptyRequest);
        }
        Ok(())
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Scripted,
    Replay,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(Self::Http),
            "scripted" => Ok(Self::Scripted),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub max_in_flight: usize,
    pub timeout_secs: f64,
    pub retry_limit: u32,
    pub backoff_base_ms: u64,
    /// Transcript to answer from (replay backend).
    pub transcript: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint_url: None,
            model_name: DEFAULT_MODEL.into(),
            max_in_flight: 8,
            timeout_secs: 120.0,
            retry_limit: 3,
            backoff_base_ms: 500,
            transcript: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be positive".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_none() => {
                Err(LlmError::Config("http backend requires endpoint_url".into()))
            }
            BackendKind::Replay if self.transcript.is_none() => {
                Err(LlmError::Config("replay backend requires a transcript path".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    capacity: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "limiter capacity must be positive");
        Self {
            capacity,
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().expect("limiter poisoned");
        while *n >= self.capacity {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::Relaxed);
        Permit { limiter: self }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Highest number of permits held at once so far.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_use.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
}

/// Chat-completions request body for `request`.
pub fn wire_body(model: &str, request: &ChatRequest) -> serde_json::Value {
    serde_json::to_value(WireRequest {
        model,
        messages: [
            WireMessage {
                role: "system",
                content: &request.system_text,
            },
            WireMessage {
                role: "user",
                content: &request.user_text,
            },
        ],
        temperature: request.temperature,
        max_tokens: request.max_output_tokens,
    })
    .expect("request serializes")
}

/// Extracts `choices[0].message.content`.
pub fn parse_wire_response(body: &str) -> Result<String, LlmError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponseBody(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| LlmError::MalformedResponseBody("missing choices[0].message.content".into()))
}

/// Chat-completions client. One instance is shared by all node tasks so the
/// in-flight cap holds process-wide.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    retry_limit: u32,
    backoff_base: Duration,
    limiter: InFlightLimiter,
    attempts: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, LlmError> {
        let endpoint = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| LlmError::Config("http backend requires endpoint_url".into()))?;
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model: config.model_name.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry_limit: config.retry_limit,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            limiter: InFlightLimiter::new(config.max_in_flight),
            attempts: AtomicU64::new(0),
        })
    }

    /// Total HTTP attempts made, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn limiter(&self) -> &InFlightLimiter {
        &self.limiter
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, LlmError> {
        let _permit = self.limiter.acquire();
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(LlmError::HttpStatus(status));
        }
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        parse_wire_response(&text)
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let body = wire_body(&self.model, request);
        let max_attempts = self.retry_limit + 1;
        let mut attempt = 1;
        loop {
            debug!("{} attempt {attempt}", request.tag);
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < max_attempts => {
                    warn!("{} attempt {attempt} failed: {e}", request.tag);
                    let factor = 1u32 << (attempt - 1).min(16);
                    std::thread::sleep(self.backoff_base * factor);
                    attempt += 1;
                }
                Err(e) if e.is_transient() && attempt > 1 => {
                    return Err(LlmError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Predicate over a request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Any,
    Purpose(Purpose),
    Layer(usize),
    Node(NodeId),
    Contains(String),
    All(Vec<Matcher>),
}

impl Matcher {
    pub fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            Self::Any => true,
            Self::Purpose(p) => req.tag.purpose == *p,
            Self::Layer(l) => req.tag.layer == *l,
            Self::Node(n) => req.tag.node == *n,
            Self::Contains(s) => req.user_text.contains(s.as_str()),
            Self::All(ms) => ms.iter().all(|m| m.matches(req)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedResponse {
    Text(String),
    /// Response for layer `l` is entry `l - 1`; the last entry repeats.
    ByLayer(Vec<String>),
    /// Predicts the most frequent label among the prompt's labeled examples; ties go
    /// to the label seen first. Falls through to the policy default without examples.
    MajorityVote,
    /// Picks an option by hashing `(seed, request tag)`.
    HashedChoice { seed: u64, options: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub response: ScriptedResponse,
}

/// Ordered rules plus a default; the first matching rule that yields a reply wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub rules: Vec<ScriptRule>,
    pub default_response: String,
}

/// Canned planner behaviors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerScript {
    AlwaysLocal,
    AlwaysGlobal,
    #[default]
    LocalAndGlobal,
    LocalThenGlobal,
    NoOp,
    Random { seed: u64 },
}

/// JSON plan reply naming the given actions, e.g. `[{"action_type":"local aggregate"}]`.
pub fn plan_reply(actions: &[&str]) -> String {
    let items: Vec<serde_json::Value> = actions
        .iter()
        .map(|a| serde_json::json!({ "action_type": a }))
        .collect();
    serde_json::Value::Array(items).to_string()
}

pub fn prediction_reply(label: &str) -> String {
    format!("{{\"action_type\": \"predict\", \"predicted_label\": \"{label}\"}}")
}

impl ScriptedPolicy {
    pub fn new(default_response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: default_response.into(),
        }
    }

    pub fn rule(mut self, matcher: Matcher, response: ScriptedResponse) -> Self {
        self.rules.push(ScriptRule { matcher, response });
        self
    }

    /// Planner preset for planning prompts plus a majority-vote predictor. Anything
    /// else gets a non-JSON default reply.
    pub fn preset(planner: PlannerScript) -> Self {
        let local = plan_reply(&["local aggregate"]);
        let global = plan_reply(&["global aggregate"]);
        let both = plan_reply(&["local+global aggregate"]);
        let noop = plan_reply(&["no_op"]);
        let plan = match planner {
            PlannerScript::AlwaysLocal => ScriptedResponse::Text(local),
            PlannerScript::AlwaysGlobal => ScriptedResponse::Text(global),
            PlannerScript::LocalAndGlobal => ScriptedResponse::Text(both),
            PlannerScript::LocalThenGlobal => ScriptedResponse::ByLayer(vec![local, global]),
            PlannerScript::NoOp => ScriptedResponse::Text(noop),
            PlannerScript::Random { seed } => ScriptedResponse::HashedChoice {
                seed,
                options: vec![local, global, both, noop],
            },
        };
        Self::new("I am unable to decide.")
            .rule(Matcher::Purpose(Purpose::Plan), plan)
            .rule(Matcher::Purpose(Purpose::Predict), ScriptedResponse::MajorityVote)
            .rule(Matcher::Purpose(Purpose::Reask), ScriptedResponse::MajorityVote)
    }

    pub fn respond(&self, req: &ChatRequest) -> String {
        self.rules
            .iter()
            .filter(|r| r.matcher.matches(req))
            .find_map(|r| r.response.render(req))
            .unwrap_or_else(|| self.default_response.clone())
    }
}

fn example_line_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^- (.+?): ""#).expect("valid regex"))
}

fn anonymized_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^Label[ _](\d+)$").expect("valid regex"))
}

/// Labels of the example lines in a prompt's "Labeled Examples in Memory" block.
pub fn example_labels(prompt: &str) -> Vec<String> {
    let Some(start) = prompt.find("Labeled Examples in Memory:") else {
        return Vec::new();
    };
    let block = &prompt[start..];
    let block = block.find("\n\n").map_or(block, |end| &block[..end]);
    block
        .lines()
        .filter_map(|l| example_line_re().captures(l))
        .map(|c| c[1].to_owned())
        .collect()
}

/// Most frequent label among `labels`, ties to the first seen.
pub fn majority_label(labels: &[String]) -> Option<String> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(name, _)| name == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    // max_by_key returns the last maximum; iterate reversed to keep the first
    counts
        .iter()
        .rev()
        .max_by_key(|(_, c)| *c)
        .map(|(name, _)| (*name).to_owned())
}

impl ScriptedResponse {
    fn render(&self, req: &ChatRequest) -> Option<String> {
        match self {
            Self::Text(t) => Some(t.clone()),
            Self::ByLayer(texts) => {
                let i = req.tag.layer.saturating_sub(1).min(texts.len().checked_sub(1)?);
                texts.get(i).cloned()
            }
            Self::MajorityVote => {
                let winner = majority_label(&example_labels(&req.user_text))?;
                let label = match anonymized_re().captures(&winner) {
                    Some(c) => format!("Label_{}", &c[1]),
                    None => winner,
                };
                Some(prediction_reply(&label))
            }
            Self::HashedChoice { seed, options } => {
                if options.is_empty() {
                    return None;
                }
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(req.tag.to_string().as_bytes());
                let d = h.finalize();
                let mut b = [0u8; 8];
                b.copy_from_slice(&d[..8]);
                Some(options[(u64::from_le_bytes(b) % options.len() as u64) as usize].clone())
            }
        }
    }
}

/// Deterministic backend driven by a [`ScriptedPolicy`].
#[derive(Clone, Debug)]
pub struct ScriptedBackend {
    policy: ScriptedPolicy,
}

impl ScriptedBackend {
    pub fn new(policy: ScriptedPolicy) -> Self {
        Self { policy }
    }

    pub fn policy(&self) -> &ScriptedPolicy {
        &self.policy
    }
}

/// Pure function of `(policy, request)`.
pub fn scripted_complete(policy: &ScriptedPolicy, request: &ChatRequest) -> String {
    policy.respond(request)
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        Ok(scripted_complete(&self.policy, request))
    }
}

/// One request/response exchange in a transcript file (JSON Lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub version: u32,
    pub request_tag: RequestTag,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wraps a backend and records every exchange.
pub struct RecordingBackend<B> {
    inner: B,
    records: Mutex<Vec<TranscriptRecord>>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Records ordered by request tag, independent of completion order.
    pub fn records(&self) -> Vec<TranscriptRecord> {
        let mut r = self.records.lock().expect("poisoned").clone();
        r.sort_by_key(|rec| rec.request_tag);
        r
    }

    pub fn write_transcript(&self, path: &Path) -> Result<(), LlmError> {
        write_transcript(path, &self.records())
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let result = self.inner.complete(request);
        let record = TranscriptRecord {
            version: TRANSCRIPT_VERSION,
            request_tag: request.tag,
            system: request.system_text.clone(),
            user: request.user_text.clone(),
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
        };
        self.records.lock().expect("poisoned").push(record);
        result
    }
}

pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> Result<(), LlmError> {
    let io = |source| LlmError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, LlmError> {
    let io = |source| LlmError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(&line)
            .map_err(|e| LlmError::Config(format!("bad transcript line: {e}")))?;
        if rec.version != TRANSCRIPT_VERSION {
            return Err(LlmError::Config(format!(
                "unsupported transcript version {}",
                rec.version
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Answers from a recorded transcript, keyed by request tag.
pub struct ReplayBackend {
    records: HashMap<RequestTag, TranscriptRecord>,
    strict: bool,
}

impl ReplayBackend {
    /// With `strict`, a prompt that differs from the recorded one is an error.
    pub fn new(records: Vec<TranscriptRecord>, strict: bool) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.request_tag, r)).collect(),
            strict,
        }
    }

    pub fn from_file(path: &Path, strict: bool) -> Result<Self, LlmError> {
        Ok(Self::new(read_transcript(path)?, strict))
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let tag = request.tag;
        let rec = self
            .records
            .get(&tag)
            .ok_or_else(|| LlmError::ReplayMiss(tag.to_string()))?;
        if self.strict && rec.user != request.user_text {
            return Err(LlmError::ReplayMismatch(tag.to_string()));
        }
        match (&rec.response, &rec.error) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(e)) => Err(LlmError::Transport(format!("recorded failure: {e}"))),
            (None, None) => Err(LlmError::ReplayMiss(tag.to_string())),
        }
    }
}

/// Builds the backend described by `config`. `policy` is used for the scripted kind.
pub fn backend_from_config(
    config: &BackendConfig,
    policy: ScriptedPolicy,
) -> Result<Box<dyn LlmBackend>, LlmError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Box::new(HttpBackend::new(config)?),
        BackendKind::Scripted => Box::new(ScriptedBackend::new(policy)),
        BackendKind::Replay => Box::new(ReplayBackend::from_file(
            config.transcript.as_deref().expect("validated"),
            true,
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(purpose: Purpose, layer: usize, user: &str) -> ChatRequest {
        ChatRequest::new("sys", user, RequestTag::new(4, layer, purpose))
    }

    #[test]
    fn tag_round_trip() {
        for tag in [
            RequestTag::new(12, 3, Purpose::Plan),
            RequestTag::new(0, 0, Purpose::Reask).with_seq(2),
        ] {
            assert_eq!(tag.to_string().parse::<RequestTag>().unwrap(), tag);
        }
        assert_eq!(RequestTag::new(5, 2, Purpose::Summarize).to_string(), "node=5/layer=2/summarize");
        assert!("node=x/layer=1/plan".parse::<RequestTag>().is_err());
    }

    #[test]
    fn request_defaults() {
        let r = req(Purpose::Plan, 1, "u");
        assert_eq!(r.temperature, 0.0);
        assert_eq!(r.max_output_tokens, 512);
        assert_eq!(DEFAULT_MODEL, "Qwen2.5-14B-Instruct");
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig {
            kind: BackendKind::Http,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.endpoint_url = Some("http://localhost:1".into());
        assert!(c.validate().is_ok());
        c.kind = BackendKind::Replay;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scripted_plan_rules() {
        let p = ScriptedPolicy::new("default").rule(
            Matcher::Contains("plan".into()),
            ScriptedResponse::Text(plan_reply(&["local aggregate"])),
        );
        assert_eq!(
            scripted_complete(&p, &req(Purpose::Plan, 1, "please plan")),
            r#"[{"action_type":"local aggregate"}]"#
        );
        assert_eq!(scripted_complete(&p, &req(Purpose::Plan, 1, "other")), "default");
    }

    #[test]
    fn local_then_global_by_layer() {
        let p = ScriptedPolicy::preset(PlannerScript::LocalThenGlobal);
        let r1 = scripted_complete(&p, &req(Purpose::Plan, 1, "x"));
        let r3 = scripted_complete(&p, &req(Purpose::Plan, 3, "x"));
        assert!(r1.contains("local aggregate"));
        assert!(r3.contains("global aggregate"));
        let again = scripted_complete(&p, &req(Purpose::Plan, 1, "x"));
        assert_eq!(r1, again);
    }

    fn prompt_with(labels: &[&str]) -> String {
        let mut s = String::from("Node State:\n- Text Feature: \"t\"\n\nLabeled Examples in Memory:\nLocal:\n");
        for l in labels {
            s.push_str(&format!("- {l}: \"text\"\n"));
        }
        s.push_str("Global:\n(none)\n\nCandidates: [\"Label 0\"]\n");
        s
    }

    #[test]
    fn majority_vote_counts_examples() {
        let p = ScriptedPolicy::preset(PlannerScript::AlwaysLocal);
        let prompt = prompt_with(&["Label 1", "Label 1", "Label 2"]);
        // counting oracle
        let labels = example_labels(&prompt);
        assert_eq!(labels, vec!["Label 1", "Label 1", "Label 2"]);
        assert_eq!(
            scripted_complete(&p, &req(Purpose::Predict, 3, &prompt)),
            "{\"action_type\": \"predict\", \"predicted_label\": \"Label_1\"}"
        );
    }

    #[test]
    fn majority_ties_go_to_first_seen() {
        let labels: Vec<String> = ["B", "A", "A", "B", "C"].iter().map(|s| s.to_string()).collect();
        assert_eq!(majority_label(&labels).as_deref(), Some("B"));
        assert_eq!(majority_label(&[]), None);
    }

    #[test]
    fn majority_without_examples_falls_back_to_default() {
        let p = ScriptedPolicy::preset(PlannerScript::AlwaysLocal);
        let prompt = prompt_with(&[]);
        assert_eq!(scripted_complete(&p, &req(Purpose::Predict, 1, &prompt)), p.default_response);
    }

    #[test]
    fn hashed_choice_is_pure() {
        let p = ScriptedPolicy::preset(PlannerScript::Random { seed: 9 });
        for layer in 1..5 {
            let a = scripted_complete(&p, &req(Purpose::Plan, layer, "x"));
            let b = scripted_complete(&p, &req(Purpose::Plan, layer, "y"));
            assert_eq!(a, b, "depends only on the tag");
        }
    }

    #[test]
    fn empty_request_rejected() {
        let b = ScriptedBackend::new(ScriptedPolicy::new("d"));
        assert!(matches!(b.complete(&req(Purpose::Plan, 1, "  ")), Err(LlmError::EmptyRequest)));
    }

    #[test]
    fn wire_response_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi there"}}]}"#;
        assert_eq!(parse_wire_response(body).unwrap(), "hi there");
        assert!(matches!(parse_wire_response("{}"), Err(LlmError::MalformedResponseBody(_))));
        assert!(matches!(parse_wire_response("nope"), Err(LlmError::MalformedResponseBody(_))));
    }

    #[test]
    fn recording_and_replay() {
        let rec = RecordingBackend::new(ScriptedBackend::new(ScriptedPolicy::preset(
            PlannerScript::AlwaysGlobal,
        )));
        let r2 = req(Purpose::Plan, 2, "b");
        let r1 = req(Purpose::Plan, 1, "a");
        let a2 = rec.complete(&r2).unwrap();
        let a1 = rec.complete(&r1).unwrap();
        let records = rec.records();
        assert_eq!(records[0].request_tag.layer, 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        rec.write_transcript(&path).unwrap();
        let replay = ReplayBackend::from_file(&path, true).unwrap();
        assert_eq!(replay.complete(&r1).unwrap(), a1);
        assert_eq!(replay.complete(&r2).unwrap(), a2);
        assert!(matches!(
            replay.complete(&req(Purpose::Plan, 1, "changed")),
            Err(LlmError::ReplayMismatch(_))
        ));
        assert!(matches!(
            replay.complete(&req(Purpose::Predict, 9, "a")),
            Err(LlmError::ReplayMiss(_))
        ));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = InFlightLimiter::new(3);
        std::thread::scope(|s| {
            for _ in 0..20 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(limiter.peak() <= 3);
        assert!(limiter.peak() >= 1);
    }
}
