//! A stand-in chat-completion endpoint that writes notes from a
//! [`Lexicon`] and codes notes by signature lookup. Used to record
//! fixtures and to run the pipeline without a hosted model.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::benchmark::Lexicon;
use crate::gateway::{ChatRequest, ChatTransport, TransportError};
use crate::icd::IcdCode;
use crate::prompt::Role;

/// Deterministic responder: the same request always yields the same text.
#[derive(Debug, Clone)]
pub struct SimulatedWriter {
    lexicon: Lexicon,
    by_title: BTreeMap<String, IcdCode>,
    noise_words: usize,
    /// Mention the first code inline, as a disobedient model would.
    pub leak_codes: bool,
}

impl SimulatedWriter {
    pub fn new(lexicon: Lexicon, noise_words: usize) -> Self {
        let by_title = lexicon.titles.iter().map(|(c, t)| (t.clone(), c.clone())).collect();
        SimulatedWriter {
            lexicon,
            by_title,
            noise_words,
            leak_codes: true,
        }
    }

    pub fn respond(&self, request: &ChatRequest) -> String {
        let hash = request.content_hash();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&hex::decode(&hash).expect("hex digest")[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let system = request
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .any(|m| m.content.contains("icd_code"));
        let user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if system {
            self.code_note(user, hash.as_bytes()[0].is_multiple_of(2))
        } else {
            self.write_note(user, &mut rng)
        }
    }

    fn write_note(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let codes: Vec<IcdCode> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .filter_map(|t| self.by_title.get(t.trim()).cloned())
            .collect();
        let mut out = String::from("Discharge Summary\n\n");
        out.push_str(&self.lexicon.render(&codes, self.noise_words, rng));
        if self.leak_codes {
            if let Some(first) = codes.first() {
                out.push_str(&format!(" Principal problem ({}).", first.dotted()));
            }
        }
        out.push_str("\n\nSocial History: lives with family, no tobacco use.\n");
        out.push_str("Family History: noncontributory.\n\nDischarge Diagnoses\n");
        for c in &codes {
            out.push_str(&format!("{} [{}]\n", self.lexicon.titles[c], c.dotted()));
        }
        out
    }

    fn code_note(&self, note: &str, as_json: bool) -> String {
        let codes = self.lexicon.detect(note);
        if as_json {
            let items: Vec<serde_json::Value> = codes
                .iter()
                .map(|c| serde_json::json!({"diagnosis": self.lexicon.titles[c], "icd_code": c.dotted()}))
                .collect();
            serde_json::to_string_pretty(&items).expect("json")
        } else {
            let mut out = String::from("Here are the diagnoses I found:\n");
            for c in &codes {
                out.push_str(&format!("- {} - {}\n", self.lexicon.titles[c], c.dotted()));
            }
            out
        }
    }
}

/// In-process transport; no sockets involved.
pub struct SimulatedTransport(pub SimulatedWriter);

impl ChatTransport for SimulatedTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        Ok(self.0.respond(request))
    }
}

#[derive(Clone)]
struct ServerState {
    writer: Arc<SimulatedWriter>,
    faults: Arc<Mutex<VecDeque<u16>>>,
    requests: Arc<Mutex<Vec<serde_json::Value>>>,
}

async fn chat(State(state): State<ServerState>, Json(body): Json<serde_json::Value>) -> Response {
    state.requests.lock().expect("lock").push(body.clone());
    if let Some(code) = state.faults.lock().expect("lock").pop_front() {
        let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (status, "injected failure").into_response();
    }
    let request: ChatRequest = match serde_json::from_value(body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let text = state.writer.respond(&request);
    Json(serde_json::json!({
        "id": "sim",
        "object": "chat.completion",
        "model": request.model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
    }))
    .into_response()
}

/// A simulated endpoint on a loopback port, served from a background
/// thread until dropped. `base_url` ends in `/v1`.
pub struct SimServer {
    pub addr: SocketAddr,
    faults: Arc<Mutex<VecDeque<u16>>>,
    requests: Arc<Mutex<Vec<serde_json::Value>>>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl SimServer {
    pub fn start(writer: SimulatedWriter) -> std::io::Result<Self> {
        let faults = Arc::new(Mutex::new(VecDeque::new()));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let state = ServerState {
            writer: Arc::new(writer),
            faults: faults.clone(),
            requests: requests.clone(),
        };
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let app = Router::new()
                    .route("/v1/chat/completions", post(chat))
                    .with_state(state);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("serve");
            });
        });
        Ok(SimServer {
            addr,
            faults,
            requests,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// The next requests fail with these statuses, in order.
    pub fn inject_faults(&self, statuses: &[u16]) {
        self.faults.lock().expect("lock").extend(statuses.iter().copied());
    }

    /// Raw JSON bodies received so far.
    pub fn requests(&self) -> Vec<serde_json::Value> {
        self.requests.lock().expect("lock").clone()
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{generate, BenchmarkConfig};
    use crate::postprocess::{extract_bracketed_codes, parse_coding_response, ParseRoute};
    use crate::prompt::{build_coding_prompt, build_generation_prompt, GenerationTemplate};
    use crate::silver::{RecordKind, SilverRecord};

    #[test]
    fn writer_round_trips_label_sets() {
        let b = generate(&BenchmarkConfig::default());
        let w = SimulatedWriter::new(b.lexicon.clone(), 10);
        let labels: Vec<IcdCode> = b.lexicon.titles.keys().take(3).cloned().collect();
        let record = SilverRecord {
            plan_id: "p".into(),
            kind: RecordKind::FewShot,
            source_doc_id: "d".into(),
            target_code: labels[0].clone(),
            label_set: labels.clone(),
            dropped_labels: vec![],
            substitution: None,
            is_duplicate: false,
        };
        let p = build_generation_prompt(&record, &b.descriptions, &GenerationTemplate::builtin()).unwrap();
        let req = ChatRequest::new(&p.spec, "m");
        let text = w.respond(&req);
        assert_eq!(text, w.respond(&req));
        let mut got = extract_bracketed_codes(&text);
        got.sort();
        assert_eq!(got, labels);

        let mut routes = std::collections::BTreeSet::new();
        for d in b.corpus.test.iter().take(12) {
            let spec = build_coding_prompt(&d.text).unwrap();
            let resp = w.respond(&ChatRequest::new(&spec, "m"));
            let pred = parse_coding_response(&d.id, &resp).unwrap();
            assert_eq!(pred.codes(), d.labels);
            routes.insert(pred.route);
        }
        assert!(routes.contains(&ParseRoute::Json) && routes.contains(&ParseRoute::RegexFallback));
    }
}
