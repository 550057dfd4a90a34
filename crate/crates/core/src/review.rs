//! Blinded review sessions over a shared pool of real and synthetic
//! documents. State is event-sourced: every write is appended to a JSONL
//! log and the in-memory view can be rebuilt from the log alone.
//!
//! Evaluators only ever see opaque aliases and document text; the
//! alias-to-document mapping stays on the server.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Document, Provenance};
use crate::metrics::{self, MetricsError, RatingCell, RatingSheet, ReviewMetric, MAX_SCORE, MIN_SCORE};
use crate::rng;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("pool has {available} {provenance} documents, {requested} requested")]
    InsufficientPool {
        provenance: Provenance,
        available: usize,
        requested: usize,
    },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("alias {0} does not belong to this session")]
    UnknownAlias(String),
    #[error("score {0} outside {MIN_SCORE}..={MAX_SCORE}")]
    InvalidScore(i64),
    #[error("{0}")]
    UnknownMetric(String),
    #[error("session {session} has {rated} of {required} ratings")]
    IncompleteSession {
        session: String,
        rated: usize,
        required: usize,
    },
    #[error("duplicate document id {0} in pool")]
    DuplicateDocument(String),
    #[error("event log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ReviewError {
    fn status(&self) -> StatusCode {
        match self {
            ReviewError::UnknownSession(_) | ReviewError::UnknownAlias(_) => StatusCode::NOT_FOUND,
            ReviewError::InvalidScore(_) | ReviewError::UnknownMetric(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::InsufficientPool { .. } | ReviewError::IncompleteSession { .. } => StatusCode::CONFLICT,
            ReviewError::Metrics(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ReviewError::InsufficientPool { .. } => "InsufficientPool",
            ReviewError::UnknownSession(_) => "UnknownSession",
            ReviewError::UnknownAlias(_) => "UnknownAlias",
            ReviewError::InvalidScore(_) => "InvalidScore",
            ReviewError::UnknownMetric(_) => "UnknownMetric",
            ReviewError::IncompleteSession { .. } => "IncompleteSession",
            ReviewError::DuplicateDocument(_) => "DuplicateDocument",
            ReviewError::Log { .. } => "Log",
            ReviewError::Metrics(_) => "Metrics",
            ReviewError::Io(_) => "Io",
        }
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": self.kind(), "message": self.to_string()});
        (self.status(), Json(body)).into_response()
    }
}

/// Documents available for review, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct ReviewPool {
    docs: BTreeMap<String, Document>,
}

impl ReviewPool {
    pub fn new(docs: impl IntoIterator<Item = Document>) -> Result<Self, ReviewError> {
        let mut map = BTreeMap::new();
        for d in docs {
            if let Some(prev) = map.insert(d.id.clone(), d) {
                return Err(ReviewError::DuplicateDocument(prev.id));
            }
        }
        Ok(ReviewPool { docs: map })
    }

    /// A seeded subset of `n_real` real and `n_synthetic` synthetic documents,
    /// so that every evaluator is shown the same items.
    pub fn sample(
        real: &[Document],
        synthetic: &[Document],
        n_real: usize,
        n_synthetic: usize,
        seed: u64,
    ) -> Result<Self, ReviewError> {
        let mut picked = Vec::new();
        for (docs, n, prov) in [(real, n_real, Provenance::Real), (synthetic, n_synthetic, Provenance::Synthetic)] {
            if docs.len() < n {
                return Err(ReviewError::InsufficientPool {
                    provenance: prov,
                    available: docs.len(),
                    requested: n,
                });
            }
            let mut r = rng::stream(seed, &format!("review-pool:{prov}"));
            for i in rng::sample_indices(&mut r, docs.len(), n) {
                let mut d = docs[i].clone();
                d.provenance = prov;
                picked.push(d);
            }
        }
        Self::new(picked)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs.get(id)
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.docs.values().filter(|d| d.provenance == provenance).count()
    }

    fn ids(&self, provenance: Provenance) -> Vec<&str> {
        self.docs
            .values()
            .filter(|d| d.provenance == provenance)
            .map(|d| d.id.as_str())
            .collect()
    }
}

/// One entry of the append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    SessionCreated {
        session_id: String,
        evaluator: String,
        seed: u64,
        /// `(alias, doc_id)` in presentation order.
        documents: Vec<(String, String)>,
        timestamp_ms: u64,
    },
    Rating {
        session_id: String,
        alias: String,
        metric: ReviewMetric,
        score: u8,
        comment: String,
        /// Set when the write replaced an earlier score.
        overwrite: bool,
        timestamp_ms: u64,
    },
}

/// Server-side view of a session. Never serialized to evaluators.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewSession {
    pub session_id: String,
    pub evaluator: String,
    pub seed: u64,
    pub documents: Vec<(String, String)>,
    pub ratings: BTreeMap<(String, ReviewMetric), StoredRating>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRating {
    pub score: u8,
    pub comment: String,
}

impl ReviewSession {
    pub fn required(&self) -> usize {
        self.documents.len() * ReviewMetric::ALL.len()
    }

    pub fn rated(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rated() == self.required()
    }

    fn has_alias(&self, alias: &str) -> bool {
        self.documents.iter().any(|(a, _)| a == alias)
    }

    fn pending(&self, alias: &str) -> Vec<ReviewMetric> {
        ReviewMetric::ALL
            .into_iter()
            .filter(|m| !self.ratings.contains_key(&(alias.to_string(), *m)))
            .collect()
    }

    /// The first document in presentation order with unrated metrics.
    pub fn cursor(&self) -> Option<usize> {
        self.documents.iter().position(|(a, _)| !self.pending(a).is_empty())
    }

    pub fn progress(&self) -> Progress {
        let done = self
            .documents
            .iter()
            .filter(|(a, _)| self.pending(a).is_empty())
            .count();
        Progress {
            documents_total: self.documents.len(),
            documents_done: done,
            ratings_total: self.required(),
            ratings_done: self.rated(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub documents_total: usize,
    pub documents_done: usize,
    pub ratings_total: usize,
    pub ratings_done: usize,
}

#[derive(Debug, Default)]
struct Snapshot {
    sessions: BTreeMap<String, ReviewSession>,
    /// alias -> (session, doc_id)
    aliases: BTreeMap<String, (String, String)>,
    events: usize,
}

impl Snapshot {
    fn apply(&mut self, event: &ReviewEvent) -> Result<(), String> {
        match event {
            ReviewEvent::SessionCreated {
                session_id,
                evaluator,
                seed,
                documents,
                ..
            } => {
                if self.sessions.contains_key(session_id) {
                    return Err(format!("session {session_id} created twice"));
                }
                for (alias, doc) in documents {
                    if self
                        .aliases
                        .insert(alias.clone(), (session_id.clone(), doc.clone()))
                        .is_some()
                    {
                        return Err(format!("alias {alias} reused"));
                    }
                }
                self.sessions.insert(
                    session_id.clone(),
                    ReviewSession {
                        session_id: session_id.clone(),
                        evaluator: evaluator.clone(),
                        seed: *seed,
                        documents: documents.clone(),
                        ratings: BTreeMap::new(),
                    },
                );
            }
            ReviewEvent::Rating {
                session_id,
                alias,
                metric,
                score,
                comment,
                ..
            } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| format!("rating for unknown session {session_id}"))?;
                if !s.has_alias(alias) {
                    return Err(format!("rating for unknown alias {alias}"));
                }
                s.ratings.insert(
                    (alias.clone(), *metric),
                    StoredRating {
                        score: *score,
                        comment: comment.clone(),
                    },
                );
            }
        }
        self.events += 1;
        Ok(())
    }
}

/// A rating as submitted by an evaluator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub session_id: String,
    pub alias: String,
    pub metric: String,
    pub score: i64,
    #[serde(default)]
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingAck {
    pub session_id: String,
    pub alias: String,
    pub metric: ReviewMetric,
    pub overwritten: bool,
    pub audit_entries: usize,
    pub progress: Progress,
}

/// Sessions, ratings and the event log behind them.
pub struct ReviewStore {
    pool: ReviewPool,
    state: RwLock<Snapshot>,
    /// Serializes writers; `None` keeps the log in memory only.
    log: Mutex<Option<File>>,
    log_path: Option<PathBuf>,
    memory_log: Mutex<Vec<ReviewEvent>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl ReviewStore {
    pub fn in_memory(pool: ReviewPool) -> Self {
        ReviewStore {
            pool,
            state: RwLock::new(Snapshot::default()),
            log: Mutex::new(None),
            log_path: None,
            memory_log: Mutex::new(Vec::new()),
        }
    }

    /// Opens (or creates) a log file and replays any events already in it.
    pub fn open(pool: ReviewPool, log_path: &Path) -> Result<Self, ReviewError> {
        let mut snap = Snapshot::default();
        let mut events = Vec::new();
        if log_path.exists() {
            for (i, line) in BufReader::new(File::open(log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: ReviewEvent = serde_json::from_str(&line).map_err(|e| ReviewError::Log {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                snap.apply(&ev).map_err(|message| ReviewError::Log { line: i + 1, message })?;
                events.push(ev);
            }
        }
        if let Some(dir) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(log_path)?;
        Ok(ReviewStore {
            pool,
            state: RwLock::new(snap),
            log: Mutex::new(Some(file)),
            log_path: Some(log_path.to_path_buf()),
            memory_log: Mutex::new(events),
        })
    }

    pub fn pool(&self) -> &ReviewPool {
        &self.pool
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    /// Every event written so far, oldest first.
    pub fn events(&self) -> Vec<ReviewEvent> {
        self.memory_log.lock().expect("log lock").clone()
    }

    pub fn audit_len(&self) -> usize {
        self.state.read().expect("state lock").events
    }

    fn append(&self, event: ReviewEvent) -> Result<(), ReviewError> {
        let mut log = self.log.lock().expect("log lock");
        if let Some(f) = log.as_mut() {
            let mut line = serde_json::to_vec(&event).map_err(std::io::Error::from)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        let mut state = self.state.write().expect("state lock");
        state.apply(&event).map_err(|message| ReviewError::Log {
            line: state.events + 1,
            message,
        })?;
        self.memory_log.lock().expect("log lock").push(event);
        Ok(())
    }

    /// Samples `n_real` + `n_synthetic` pool documents without replacement,
    /// shuffles them by `seed` and gives each a fresh random alias.
    pub fn create_session(
        &self,
        evaluator: &str,
        n_real: usize,
        n_synthetic: usize,
        seed: u64,
    ) -> Result<ReviewSession, ReviewError> {
        let mut chosen: Vec<String> = Vec::new();
        for (prov, n) in [(Provenance::Real, n_real), (Provenance::Synthetic, n_synthetic)] {
            let ids = self.pool.ids(prov);
            if ids.len() < n {
                return Err(ReviewError::InsufficientPool {
                    provenance: prov,
                    available: ids.len(),
                    requested: n,
                });
            }
            let mut r = rng::stream(seed, &format!("review-session:{prov}"));
            chosen.extend(rng::sample_indices(&mut r, ids.len(), n).into_iter().map(|i| ids[i].to_string()));
        }
        chosen.sort();
        rng::shuffle(&mut rng::stream(seed, "review-order"), &mut chosen);

        // The writer lock is held across id/alias allocation so concurrent
        // creators cannot collide.
        let _guard = self.log.lock().expect("log lock");
        let (session_id, documents) = {
            let state = self.state.read().expect("state lock");
            let session_id = format!("session-{:04}", state.sessions.len() + 1);
            let mut r = rng::stream(seed, &format!("review-alias:{session_id}"));
            let mut used: BTreeSet<String> = state.aliases.keys().cloned().collect();
            let docs = chosen
                .into_iter()
                .map(|id| {
                    let alias = loop {
                        let a = format!("doc-{:016x}", r.random::<u64>());
                        if used.insert(a.clone()) {
                            break a;
                        }
                    };
                    (alias, id)
                })
                .collect::<Vec<_>>();
            (session_id, docs)
        };
        drop(_guard);
        self.append(ReviewEvent::SessionCreated {
            session_id: session_id.clone(),
            evaluator: evaluator.to_string(),
            seed,
            documents,
            timestamp_ms: now_ms(),
        })?;
        self.session(&session_id)
    }

    pub fn session(&self, id: &str) -> Result<ReviewSession, ReviewError> {
        self.state
            .read()
            .expect("state lock")
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ReviewError::UnknownSession(id.to_string()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.state.read().expect("state lock").sessions.keys().cloned().collect()
    }

    /// Text of an aliased document; the only document content ever served.
    pub fn document(&self, alias: &str) -> Result<BlindDocument, ReviewError> {
        let state = self.state.read().expect("state lock");
        let (_, doc_id) = state
            .aliases
            .get(alias)
            .ok_or_else(|| ReviewError::UnknownAlias(alias.to_string()))?;
        let doc = self
            .pool
            .get(doc_id)
            .ok_or_else(|| ReviewError::UnknownAlias(alias.to_string()))?;
        Ok(BlindDocument {
            alias: alias.to_string(),
            text: doc.text.clone(),
        })
    }

    pub fn submit_rating(&self, sub: &RatingSubmission) -> Result<RatingAck, ReviewError> {
        let metric: ReviewMetric = sub.metric.parse().map_err(ReviewError::UnknownMetric)?;
        if sub.score < MIN_SCORE as i64 || sub.score > MAX_SCORE as i64 {
            return Err(ReviewError::InvalidScore(sub.score));
        }
        let session = self.session(&sub.session_id)?;
        if !session.has_alias(&sub.alias) {
            return Err(ReviewError::UnknownAlias(sub.alias.clone()));
        }
        let overwrite = session.ratings.contains_key(&(sub.alias.clone(), metric));
        self.append(ReviewEvent::Rating {
            session_id: sub.session_id.clone(),
            alias: sub.alias.clone(),
            metric,
            score: sub.score as u8,
            comment: sub.comment.clone(),
            overwrite,
            timestamp_ms: now_ms(),
        })?;
        let session = self.session(&sub.session_id)?;
        Ok(RatingAck {
            session_id: sub.session_id.clone(),
            alias: sub.alias.clone(),
            metric,
            overwritten: overwrite,
            audit_entries: self.audit_len(),
            progress: session.progress(),
        })
    }

    pub fn rating(&self, session: &str, alias: &str, metric: ReviewMetric) -> Result<Option<StoredRating>, ReviewError> {
        let s = self.session(session)?;
        if !s.has_alias(alias) {
            return Err(ReviewError::UnknownAlias(alias.to_string()));
        }
        Ok(s.ratings.get(&(alias.to_string(), metric)).cloned())
    }

    pub fn next(&self, session: &str) -> Result<NextItem, ReviewError> {
        let s = self.session(session)?;
        let (alias, pending, position) = match s.cursor() {
            Some(i) => {
                let alias = s.documents[i].0.clone();
                let pending = s.pending(&alias);
                (Some(alias), pending, Some(i + 1))
            }
            None => (None, Vec::new(), None),
        };
        Ok(NextItem {
            session_id: s.session_id.clone(),
            alias,
            position,
            pending_metrics: pending,
            progress: s.progress(),
            complete: s.is_complete(),
        })
    }

    /// De-aliased ratings with provenance restored. Without `partial`, every
    /// listed session must be complete. An empty `sessions` means all.
    pub fn export_sheet(&self, sessions: &[String], partial: bool) -> Result<RatingSheet, ReviewError> {
        let ids = if sessions.is_empty() {
            self.session_ids()
        } else {
            sessions.to_vec()
        };
        let mut cells = Vec::new();
        for id in &ids {
            let s = self.session(id)?;
            if !partial && !s.is_complete() {
                return Err(ReviewError::IncompleteSession {
                    session: s.session_id.clone(),
                    rated: s.rated(),
                    required: s.required(),
                });
            }
            for (alias, doc_id) in &s.documents {
                let prov = self
                    .pool
                    .get(doc_id)
                    .map(|d| d.provenance)
                    .ok_or_else(|| ReviewError::UnknownAlias(alias.clone()))?;
                for m in ReviewMetric::ALL {
                    if let Some(r) = s.ratings.get(&(alias.clone(), m)) {
                        cells.push(RatingCell {
                            evaluator: s.evaluator.clone(),
                            doc_id: doc_id.clone(),
                            provenance: prov,
                            metric: m,
                            score: r.score,
                            comment: r.comment.clone(),
                        });
                    }
                }
            }
        }
        Ok(RatingSheet { cells })
    }

    pub fn agreement(&self, partial: bool) -> Result<AgreementReport, ReviewError> {
        agreement_report(&self.export_sheet(&[], partial)?)
    }
}

/// What an evaluator sees of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindDocument {
    pub alias: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextItem {
    pub session_id: String,
    pub alias: Option<String>,
    /// 1-based position in the session.
    pub position: Option<usize>,
    pub pending_metrics: Vec<ReviewMetric>,
    pub progress: Progress,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementCell {
    pub metric: ReviewMetric,
    pub provenance: Provenance,
    /// `None` when every rating falls in one category and kappa is undefined.
    pub kappa: Option<f64>,
    pub kappa_undefined: bool,
    pub mean: f64,
    pub ratings: usize,
}

/// Kappa and mean score for each metric on each provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub evaluators: usize,
    pub documents: usize,
    pub cells: Vec<AgreementCell>,
}

impl AgreementReport {
    pub fn cell(&self, metric: ReviewMetric, provenance: Provenance) -> Option<&AgreementCell> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.provenance == provenance)
    }

    /// One row per metric: `metric,kappa_synthetic,mean_synthetic,kappa_real,mean_real`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "kappa_synthetic", "mean_synthetic", "kappa_real", "mean_real"])?;
        let fmt_k = |c: Option<&AgreementCell>| match c {
            Some(AgreementCell { kappa: Some(k), .. }) => format!("{k:.3}"),
            Some(_) => "undefined".to_string(),
            None => String::new(),
        };
        let fmt_m = |c: Option<&AgreementCell>| c.map(|c| format!("{:.3}", c.mean)).unwrap_or_default();
        for m in ReviewMetric::ALL {
            let s = self.cell(m, Provenance::Synthetic);
            let r = self.cell(m, Provenance::Real);
            w.write_record([m.as_str().to_string(), fmt_k(s), fmt_m(s), fmt_k(r), fmt_m(r)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Kappa and mean for every (metric, provenance) present in the sheet.
pub fn agreement_report(sheet: &RatingSheet) -> Result<AgreementReport, ReviewError> {
    let provs: BTreeSet<Provenance> = sheet.cells.iter().map(|c| c.provenance).collect();
    let mut cells = Vec::new();
    for m in ReviewMetric::ALL {
        for p in [Provenance::Synthetic, Provenance::Real] {
            if !provs.contains(&p) {
                continue;
            }
            let n = sheet
                .cells
                .iter()
                .filter(|c| c.metric == m && c.provenance == p)
                .count();
            if n == 0 {
                continue;
            }
            let kappa = match metrics::fleiss_kappa(sheet, m, p) {
                Ok(k) => Some(k),
                Err(MetricsError::DegenerateAgreement) => None,
                Err(e) => return Err(e.into()),
            };
            cells.push(AgreementCell {
                metric: m,
                provenance: p,
                kappa,
                kappa_undefined: kappa.is_none(),
                mean: metrics::mean_scores(sheet, m, p)?,
                ratings: n,
            });
        }
    }
    Ok(AgreementReport {
        evaluators: sheet.cells.iter().map(|c| &c.evaluator).collect::<BTreeSet<_>>().len(),
        documents: sheet.cells.iter().map(|c| &c.doc_id).collect::<BTreeSet<_>>().len(),
        cells,
    })
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub evaluator: String,
    pub n_real: Option<usize>,
    pub n_synthetic: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub evaluator: String,
    pub aliases: Vec<String>,
    pub progress: Progress,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PartialQuery {
    #[serde(default)]
    pub partial: bool,
}

/// Defaults applied to `POST /sessions` bodies that omit them.
#[derive(Debug, Clone, Copy)]
pub struct SessionDefaults {
    pub n_real: usize,
    pub n_synthetic: usize,
    pub seed: u64,
}

#[derive(Clone)]
struct AppState {
    store: Arc<ReviewStore>,
    defaults: SessionDefaults,
}

async fn create_session(
    State(app): State<AppState>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ReviewError> {
    let s = app.store.create_session(
        &body.evaluator,
        body.n_real.unwrap_or(app.defaults.n_real),
        body.n_synthetic.unwrap_or(app.defaults.n_synthetic),
        body.seed.unwrap_or(app.defaults.seed),
    )?;
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: s.session_id.clone(),
            evaluator: s.evaluator.clone(),
            aliases: s.documents.iter().map(|(a, _)| a.clone()).collect(),
            progress: s.progress(),
        }),
    ))
}

async fn next_item(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<NextItem>, ReviewError> {
    Ok(Json(app.store.next(&id)?))
}

#[derive(Debug, Clone, Serialize)]
struct SessionRating {
    alias: String,
    metric: ReviewMetric,
    score: u8,
    comment: String,
}

async fn session_ratings(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Vec<SessionRating>>, ReviewError> {
    let s = app.store.session(&id)?;
    Ok(Json(
        s.ratings
            .iter()
            .map(|((alias, metric), r)| SessionRating {
                alias: alias.clone(),
                metric: *metric,
                score: r.score,
                comment: r.comment.clone(),
            })
            .collect(),
    ))
}

async fn document(State(app): State<AppState>, UrlPath(alias): UrlPath<String>) -> Result<Json<BlindDocument>, ReviewError> {
    Ok(Json(app.store.document(&alias)?))
}

async fn rate(State(app): State<AppState>, Json(body): Json<RatingSubmission>) -> Result<Json<RatingAck>, ReviewError> {
    Ok(Json(app.store.submit_rating(&body)?))
}

async fn agreement(
    State(app): State<AppState>,
    Query(q): Query<PartialQuery>,
) -> Result<Json<AgreementReport>, ReviewError> {
    Ok(Json(app.store.agreement(q.partial)?))
}

/// The review API, plus the frontend bundle under `/app` when given.
pub fn router(store: Arc<ReviewStore>, defaults: SessionDefaults, static_dir: Option<&Path>) -> Router {
    let app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/ratings", get(session_ratings))
        .route("/documents/{alias}", get(document))
        .route("/ratings", post(rate))
        .route("/reports/agreement", get(agreement))
        .with_state(AppState { store, defaults });
    match static_dir {
        Some(dir) => app.nest_service("/app", tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

/// Serves until the process is stopped.
pub fn serve_blocking(
    store: Arc<ReviewStore>,
    defaults: SessionDefaults,
    bind: &str,
    static_dir: Option<&Path>,
) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let app = router(store, defaults, static_dir);
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        tracing::info!(addr = %listener.local_addr()?, "review server listening");
        axum::serve(listener, app).await
    })
}

/// A review server on a loopback port in a background thread, stopped on
/// drop. Used by tests and examples.
pub struct ReviewServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ReviewServer {
    pub fn start(store: Arc<ReviewStore>, defaults: SessionDefaults) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(store, defaults, None);
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("serve");
            });
        });
        Ok(ReviewServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ReviewServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n_real: usize, n_syn: usize) -> ReviewPool {
        let mut docs = Vec::new();
        for i in 0..n_real {
            docs.push(Document::new(format!("r{i}"), format!("real text {i}"), [], Provenance::Real));
        }
        for i in 0..n_syn {
            docs.push(Document::new(format!("s{i}"), format!("generated text {i}"), [], Provenance::Synthetic));
        }
        ReviewPool::new(docs).unwrap()
    }

    fn rate_all(store: &ReviewStore, sid: &str, score: i64) {
        let s = store.session(sid).unwrap();
        for (alias, _) in &s.documents {
            for m in ReviewMetric::ALL {
                store
                    .submit_rating(&RatingSubmission {
                        session_id: sid.into(),
                        alias: alias.clone(),
                        metric: m.as_str().into(),
                        score,
                        comment: "ok".into(),
                    })
                    .unwrap();
            }
        }
    }

    #[test]
    fn sessions_are_exhaustive_and_deterministic() {
        let a = ReviewStore::in_memory(pool(10, 10));
        let s = a.create_session("e1", 10, 10, 3).unwrap();
        assert_eq!(s.documents.len(), 20);
        let ids: BTreeSet<_> = s.documents.iter().map(|d| d.1.clone()).collect();
        assert_eq!(ids.len(), 20);
        let b = ReviewStore::in_memory(pool(10, 10));
        assert_eq!(b.create_session("e1", 10, 10, 3).unwrap().documents, s.documents);
        assert!(matches!(
            a.create_session("e2", 11, 10, 3),
            Err(ReviewError::InsufficientPool { requested: 11, .. })
        ));
    }

    #[test]
    fn ratings_validate_and_overwrite_with_audit() {
        let store = ReviewStore::in_memory(pool(2, 2));
        let s = store.create_session("e", 2, 2, 1).unwrap();
        let alias = s.documents[0].0.clone();
        let sub = |metric: &str, score| RatingSubmission {
            session_id: s.session_id.clone(),
            alias: alias.clone(),
            metric: metric.into(),
            score,
            comment: format!("c{score}"),
        };
        assert!(matches!(store.submit_rating(&sub("Acceptability", 6)), Err(ReviewError::InvalidScore(6))));
        assert!(matches!(store.submit_rating(&sub("Fluency", 3)), Err(ReviewError::UnknownMetric(_))));
        let before = store.audit_len();
        assert!(!store.submit_rating(&sub("Acceptability", 3)).unwrap().overwritten);
        let ack = store.submit_rating(&sub("Acceptability", 4)).unwrap();
        assert!(ack.overwritten);
        assert_eq!(store.audit_len(), before + 2);
        let r = store.rating(&s.session_id, &alias, ReviewMetric::Acceptability).unwrap().unwrap();
        assert_eq!((r.score, r.comment.as_str()), (4, "c4"));
        let mut bad = sub("Acceptability", 3);
        bad.session_id = "nope".into();
        assert!(matches!(store.submit_rating(&bad), Err(ReviewError::UnknownSession(_))));
        let mut bad = sub("Acceptability", 3);
        bad.alias = "doc-0".into();
        assert!(matches!(store.submit_rating(&bad), Err(ReviewError::UnknownAlias(_))));
    }

    #[test]
    fn export_requires_completion_and_log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("events.jsonl");
        let store = ReviewStore::open(pool(2, 2), &log).unwrap();
        let s1 = store.create_session("e1", 2, 2, 9).unwrap();
        let s2 = store.create_session("e2", 2, 2, 9).unwrap();
        rate_all(&store, &s1.session_id, 5);
        assert!(matches!(store.export_sheet(&[], false), Err(ReviewError::IncompleteSession { .. })));
        assert_eq!(store.export_sheet(&[], true).unwrap().cells.len(), 28);
        rate_all(&store, &s2.session_id, 5);
        let sheet = store.export_sheet(&[], false).unwrap();
        assert_eq!(sheet.cells.len(), 56);

        let report = store.agreement(false).unwrap();
        assert!(report.cells.iter().all(|c| c.kappa_undefined && c.mean == 5.0));

        let reopened = ReviewStore::open(pool(2, 2), &log).unwrap();
        assert_eq!(reopened.export_sheet(&[], false).unwrap(), sheet);
        assert_eq!(reopened.audit_len(), store.audit_len());
        assert_eq!(reopened.events(), store.events());
    }

    #[test]
    fn documents_are_served_blind() {
        let store = ReviewStore::in_memory(pool(1, 1));
        let s = store.create_session("e", 1, 1, 0).unwrap();
        for (alias, id) in &s.documents {
            let json = serde_json::to_string(&store.document(alias).unwrap()).unwrap();
            assert!(!json.contains(id.as_str()) && !json.contains("provenance"));
        }
        let next = serde_json::to_string(&store.next(&s.session_id).unwrap()).unwrap();
        assert!(!next.contains("real") && !next.contains("synthetic"));
    }
}
