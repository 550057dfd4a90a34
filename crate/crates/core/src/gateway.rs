//! Chat-completion client with retries, a client-side rate budget and a
//! content-addressed record/replay fixture store.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::icd::DescriptionIndex;
use crate::prompt::{build_generation_prompt, GenerationTemplate, Message, PromptSpec};
use crate::silver::GenerationPlan;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no fixture for request {hash}")]
    FixtureMiss { hash: String },
    #[error("endpoint error after {attempts} attempt(s): {message}")]
    Endpoint { attempts: u32, message: String },
    #[error("request budget of {rpm} per minute exhausted")]
    BudgetExceeded { rpm: u32 },
    #[error("live and record modes need the data-clearance acknowledgment")]
    ClearanceRequired,
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
    #[error("bad endpoint configuration: {0}")]
    Config(String),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("prompt error: {0}")]
    Prompt(#[from] crate::prompt::PromptError),
}

impl GatewayError {
    /// Whether the error is a replay miss rather than an endpoint problem.
    pub fn is_fixture_miss(&self) -> bool {
        matches!(self, GatewayError::FixtureMiss { .. })
    }
}

/// Where and how to reach a chat-completion endpoint. The auth token is
/// read from the named environment variable at call time and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// 0 disables the budget.
    pub requests_per_minute: u32,
    /// Wait for budget instead of failing with `BudgetExceeded`.
    pub block_on_budget: bool,
    pub concurrency: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8080/v1".to_string(),
            model: "gpt-3.5-turbo-0613".to_string(),
            api_version: None,
            token_env: Some("ICDAUG_API_TOKEN".to_string()),
            timeout_secs: 120,
            max_retries: 4,
            backoff_ms: 500,
            requests_per_minute: 0,
            block_on_budget: true,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            other => Err(format!("unknown mode {other:?} (live|record|replay)")),
        }
    }
}

/// The wire request body. Field set is fixed; penalties are sent only
/// when the prompt sets them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence_penalty: Option<f64>,
    pub max_tokens: usize,
}

impl ChatRequest {
    pub fn new(spec: &PromptSpec, model: &str) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: spec.messages.clone(),
            temperature: spec.decoding.temperature,
            top_p: spec.decoding.top_p,
            frequency_penalty: spec.decoding.frequency_penalty,
            presence_penalty: spec.decoding.presence_penalty,
            max_tokens: spec.completion_budget(),
        }
    }

    /// Compact JSON with object keys in sorted order.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        value.to_string()
    }

    /// SHA-256 (hex) of the canonical JSON.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointMeta {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_version: Option<String>,
}

/// One stored request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub hash: String,
    pub request: ChatRequest,
    pub response_text: String,
    pub latency_ms: u64,
    pub endpoint: EndpointMeta,
}

/// Fixture files at `<root>/<first two hex chars>/<hash>.json`.
#[derive(Debug)]
pub struct FixtureStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl FixtureStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureStore {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[..2.min(hash.len())]).join(format!("{hash}.json"))
    }

    pub fn load(&self, hash: &str) -> Result<Option<Exchange>, GatewayError> {
        let path = self.path_for(hash);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::Fixture(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, exchange: &Exchange) -> Result<PathBuf, GatewayError> {
        let err = |e: std::io::Error| GatewayError::Fixture(e.to_string());
        let path = self.path_for(&exchange.hash);
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        fs::create_dir_all(path.parent().expect("fixture path has a parent")).map_err(err)?;
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(exchange).map_err(|e| GatewayError::Fixture(e.to_string()))?;
        fs::write(&tmp, body).map_err(err)?;
        fs::rename(&tmp, &path).map_err(err)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Status { code: u16, body: String },
    Network(String),
    Malformed(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { code, .. } => matches!(code, 408 | 429 | 500..=599),
            TransportError::Network(_) => true,
            TransportError::Malformed(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            TransportError::Network(m) => write!(f, "network: {m}"),
            TransportError::Malformed(m) => write!(f, "malformed response: {m}"),
        }
    }
}

/// Anything that can answer a chat request with the assistant text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// Blocking HTTP transport for `POST {base_url}/chat/completions`.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, GatewayError> {
        let token = match &cfg.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingToken(var.clone()))?),
            None => None,
        };
        let mut url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        if let Some(v) = &cfg.api_version {
            url.push_str("?api-version=");
            url.push_str(v);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpTransport { client, url, token })
    }
}

pub fn response_text(body: &serde_json::Value) -> Result<String, TransportError> {
    body.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| TransportError::Malformed("missing choices[0].message.content".into()))
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut req = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(serde_json::to_vec(request).map_err(|e| TransportError::Malformed(e.to_string()))?);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status {
                code: status,
                body: text.chars().take(200).collect(),
            });
        }
        let body: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))?;
        response_text(&body)
    }
}

/// Client-side token bucket holding up to one minute of requests.
#[derive(Debug)]
pub struct RateLimiter {
    rpm: u32,
    blocking: bool,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(rpm: u32, blocking: bool) -> Self {
        RateLimiter {
            rpm,
            blocking,
            state: Mutex::new((rpm as f64, Instant::now())),
        }
    }

    pub fn acquire(&self) -> Result<(), GatewayError> {
        if self.rpm == 0 {
            return Ok(());
        }
        let per_sec = self.rpm as f64 / 60.0;
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap_or_else(|p| p.into_inner());
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * per_sec).min(self.rpm as f64);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return Ok(());
                }
                if !self.blocking {
                    return Err(GatewayError::BudgetExceeded { rpm: self.rpm });
                }
                (1.0 - s.0) / per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Chat client bound to one mode. Replay mode never builds a transport.
pub struct Gateway {
    cfg: EndpointConfig,
    mode: Mode,
    store: Option<FixtureStore>,
    transport: Option<Box<dyn ChatTransport>>,
    limiter: RateLimiter,
}

impl Gateway {
    /// `clearance` is the operator's acknowledgment that sending note text
    /// to the endpoint is permitted; live and record refuse without it.
    pub fn new(
        cfg: EndpointConfig,
        mode: Mode,
        fixtures: Option<PathBuf>,
        clearance: bool,
    ) -> Result<Self, GatewayError> {
        let transport: Option<Box<dyn ChatTransport>> = match mode {
            Mode::Replay => None,
            _ => Some(Box::new(HttpTransport::new(&cfg)?)),
        };
        Self::with_transport(cfg, mode, fixtures, clearance, transport)
    }

    pub fn with_transport(
        cfg: EndpointConfig,
        mode: Mode,
        fixtures: Option<PathBuf>,
        clearance: bool,
        transport: Option<Box<dyn ChatTransport>>,
    ) -> Result<Self, GatewayError> {
        if mode != Mode::Replay && !clearance {
            return Err(GatewayError::ClearanceRequired);
        }
        if mode != Mode::Live && fixtures.is_none() {
            return Err(GatewayError::Config("record and replay need a fixture directory".into()));
        }
        if mode != Mode::Replay && transport.is_none() {
            return Err(GatewayError::Config("no transport".into()));
        }
        let limiter = RateLimiter::new(cfg.requests_per_minute, cfg.block_on_budget);
        Ok(Gateway {
            store: fixtures.map(FixtureStore::new),
            transport: if mode == Mode::Replay { None } else { transport },
            limiter,
            cfg,
            mode,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn request_for(&self, spec: &PromptSpec) -> ChatRequest {
        ChatRequest::new(spec, &self.cfg.model)
    }

    pub fn complete(&self, spec: &PromptSpec) -> Result<String, GatewayError> {
        let request = self.request_for(spec);
        let hash = request.content_hash();
        if self.mode == Mode::Replay {
            let store = self.store.as_ref().expect("replay has a store");
            return store
                .load(&hash)?
                .map(|e| e.response_text)
                .ok_or(GatewayError::FixtureMiss { hash });
        }
        let started = Instant::now();
        let text = self.send_with_retries(&request)?;
        if self.mode == Mode::Record {
            let exchange = Exchange {
                hash,
                request,
                response_text: text.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                endpoint: EndpointMeta {
                    base_url: self.cfg.base_url.clone(),
                    model: self.cfg.model.clone(),
                    api_version: self.cfg.api_version.clone(),
                },
            };
            self.store.as_ref().expect("record has a store").save(&exchange)?;
        }
        Ok(text)
    }

    fn send_with_retries(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let transport = self.transport.as_ref().expect("non-replay has a transport");
        let mut attempt = 0;
        loop {
            self.limiter.acquire()?;
            attempt += 1;
            match transport.send(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt <= self.cfg.max_retries => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    tracing::warn!(attempt, error = %e, delay_ms = delay, "transient endpoint failure, retrying");
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => {
                    return Err(GatewayError::Endpoint {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub plan_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub plan_id: String,
    pub error: String,
}

/// Responses in plan order plus per-record failures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub responses: Vec<PlanResponse>,
    pub failures: Vec<RecordFailure>,
}

impl RunReport {
    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.responses {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<PlanResponse>, GatewayError> {
        let mut out = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Fixture(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| GatewayError::Fixture(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(out)
    }
}

/// Sends every plan record with up to `concurrency` requests in flight.
/// Failures are recorded and the run continues.
pub fn run_plan(
    plan: &GenerationPlan,
    index: &DescriptionIndex,
    template: &GenerationTemplate,
    gateway: &Gateway,
) -> RunReport {
    use rayon::prelude::*;
    let work = || -> Vec<(String, Result<String, GatewayError>)> {
        plan.records
            .par_iter()
            .map(|r| {
                let result = build_generation_prompt(r, index, template)
                    .map_err(GatewayError::from)
                    .and_then(|p| gateway.complete(&p.spec));
                (r.plan_id.clone(), result)
            })
            .collect()
    };
    let threads = gateway.cfg.concurrency.max(1);
    let results = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    };
    let mut report = RunReport::default();
    for (plan_id, result) in results {
        match result {
            Ok(text) => report.responses.push(PlanResponse { plan_id, text }),
            Err(e) => {
                tracing::warn!(%plan_id, error = %e, "record failed");
                report.failures.push(RecordFailure {
                    plan_id,
                    error: e.to_string(),
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{build_coding_prompt, DecodingParams, Role};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Scripted {
        statuses: Vec<u16>,
        calls: Arc<AtomicUsize>,
    }

    impl ChatTransport for Scripted {
        fn send(&self, _: &ChatRequest) -> Result<String, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            match self.statuses.get(n) {
                Some(&code) => Err(TransportError::Status { code, body: String::new() }),
                None => Ok(format!("ok after {n}")),
            }
        }
    }

    fn cfg() -> EndpointConfig {
        EndpointConfig {
            backoff_ms: 1,
            max_retries: 2,
            token_env: None,
            ..Default::default()
        }
    }

    fn scripted(statuses: Vec<u16>) -> (Box<dyn ChatTransport>, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (Box::new(Scripted { statuses, calls: calls.clone() }), calls)
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let (t, calls) = scripted(vec![503, 429]);
        let g = Gateway::with_transport(cfg(), Mode::Live, None, true, Some(t)).unwrap();
        let spec = build_coding_prompt("note").unwrap();
        assert_eq!(g.complete(&spec).unwrap(), "ok after 2");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_max_retries_and_on_permanent_errors() {
        let (t, calls) = scripted(vec![500, 500, 500, 500]);
        let g = Gateway::with_transport(cfg(), Mode::Live, None, true, Some(t)).unwrap();
        let spec = build_coding_prompt("note").unwrap();
        assert!(matches!(g.complete(&spec), Err(GatewayError::Endpoint { attempts: 3, .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let (t, calls) = scripted(vec![400]);
        let g = Gateway::with_transport(cfg(), Mode::Live, None, true, Some(t)).unwrap();
        assert!(matches!(g.complete(&spec), Err(GatewayError::Endpoint { attempts: 1, .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn live_needs_clearance() {
        let (t, _) = scripted(vec![]);
        assert!(matches!(
            Gateway::with_transport(cfg(), Mode::Live, None, false, Some(t)),
            Err(GatewayError::ClearanceRequired)
        ));
    }

    #[test]
    fn budget_exceeded_when_not_blocking() {
        let limiter = RateLimiter::new(2, false);
        assert!(limiter.acquire().is_ok());
        assert!(limiter.acquire().is_ok());
        assert!(matches!(limiter.acquire(), Err(GatewayError::BudgetExceeded { rpm: 2 })));
        assert!(RateLimiter::new(0, false).acquire().is_ok());
    }

    #[test]
    fn request_fields_and_hash() {
        let spec = PromptSpec {
            messages: vec![Message { role: Role::User, content: "hi".into() }],
            decoding: DecodingParams {
                temperature: 0.0,
                top_p: 1.0,
                frequency_penalty: None,
                presence_penalty: None,
                max_total_tokens: 100,
            },
            template_version: "t".into(),
            sections: vec![],
        };
        let req = ChatRequest::new(&spec, "m");
        let v = serde_json::to_value(&req).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["max_tokens", "messages", "model", "temperature", "top_p"]);
        let mut other = spec.clone();
        other.decoding.temperature = 0.1;
        assert_ne!(req.content_hash(), ChatRequest::new(&other, "m").content_hash());
        assert_eq!(req.content_hash().len(), 64);
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = scripted(vec![]);
        let rec = Gateway::with_transport(cfg(), Mode::Record, Some(dir.path().into()), true, Some(t)).unwrap();
        let spec = build_coding_prompt("note").unwrap();
        let text = rec.complete(&spec).unwrap();
        let replay = Gateway::with_transport(cfg(), Mode::Replay, Some(dir.path().into()), false, None).unwrap();
        assert_eq!(replay.complete(&spec).unwrap(), text);
        let other = build_coding_prompt("another note").unwrap();
        assert!(replay.complete(&other).unwrap_err().is_fixture_miss());
    }
}
