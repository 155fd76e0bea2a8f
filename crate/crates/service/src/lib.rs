//! HTTP+JSON facade over a knowledge base log: supervision queue, verdicts,
//! KB browsing and iteration control.
//!
//! Reads are served from an immutable snapshot. Every mutation goes through
//! one [`Writer`], and iterations run on a blocking worker while clients poll
//! `GET /iterations/{n}`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use nell_core::allpairs::AllPairsTable;
use nell_core::kbstore::{
    format_time, provenance, Args, Decision, FactKey, KbError, KbStore, KnowledgeBase, PatternKey, Record, Status,
    Verdict,
};
use nell_core::learner::{run_iteration, LearnerConfig, LearnerError};
use nell_core::ontology::PredicateKind;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("worker failed: {0}")]
    Worker(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Kb(e) | ServiceError::Learner(LearnerError::Kb(e)) => kb_status(e),
            ServiceError::Learner(LearnerError::UnknownPredicate(_)) => StatusCode::NOT_FOUND,
            ServiceError::Learner(_) | ServiceError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

fn kb_status(e: &KbError) -> StatusCode {
    match e {
        KbError::UnknownTarget(_) | KbError::UnknownPredicate(_) => StatusCode::NOT_FOUND,
        KbError::Arity { .. } => StatusCode::BAD_REQUEST,
        KbError::SeedVerdict(_)
        | KbError::NotEligible { .. }
        | KbError::Blacklisted(_)
        | KbError::Duplicate(_)
        | KbError::Constraint { .. }
        | KbError::NotQueued(_)
        | KbError::AlreadyTrusted { .. }
        | KbError::ProfileMismatch { .. } => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
struct Job {
    n: u32,
    request_id: String,
}

#[derive(Debug, Clone)]
struct Failure {
    n: u32,
    request_id: String,
    error: String,
}

#[derive(Debug, Default)]
struct Jobs {
    running: Option<Job>,
    last_failure: Option<Failure>,
}

struct Inner {
    store: Mutex<KbStore>,
    snapshot: RwLock<Arc<KnowledgeBase>>,
    table: Option<Arc<AllPairsTable>>,
    config: LearnerConfig,
    jobs: Mutex<Jobs>,
}

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct App {
    inner: Arc<Inner>,
}

/// Exclusive access to the KB log. Commits refresh the read snapshot.
pub struct Writer<'a> {
    store: MutexGuard<'a, KbStore>,
    snapshot: &'a RwLock<Arc<KnowledgeBase>>,
}

impl Writer<'_> {
    pub fn kb(&self) -> &KnowledgeBase {
        self.store.kb()
    }

    pub fn commit(&mut self, records: Vec<Record>) -> Result<(), KbError> {
        self.store.commit(records)?;
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = self.store.snapshot();
        Ok(())
    }
}

impl App {
    /// `table` is required for `POST /iterations`; without it the service
    /// still supports supervision and browsing.
    pub fn new(store: KbStore, table: Option<AllPairsTable>, config: LearnerConfig) -> Self {
        let snapshot = RwLock::new(store.snapshot());
        App {
            inner: Arc::new(Inner {
                store: Mutex::new(store),
                snapshot,
                table: table.map(Arc::new),
                config,
                jobs: Mutex::default(),
            }),
        }
    }

    pub fn snapshot(&self) -> Arc<KnowledgeBase> {
        Arc::clone(&self.inner.snapshot.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Blocks until the single writer is free.
    pub fn writer(&self) -> Writer<'_> {
        Writer {
            store: self.inner.store.lock().unwrap_or_else(|e| e.into_inner()),
            snapshot: &self.inner.snapshot,
        }
    }

    fn jobs(&self) -> MutexGuard<'_, Jobs> {
        self.inner.jobs.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn run_job(&self, job: &Job) -> Result<()> {
        let table = self.inner.table.as_deref().expect("checked before spawning");
        let config = &self.inner.config;
        let snapshot = self.snapshot();
        let mut result = run_iteration(&snapshot, table, config, Utc::now())?;
        let mut writer = self.writer();
        if writer.kb().records().len() != snapshot.records().len() {
            // Verdicts landed meanwhile; redo against the current state.
            result = run_iteration(writer.kb(), table, config, Utc::now())?;
        }
        debug_assert_eq!(result.iteration, job.n);
        writer.commit(result.with_request_id(Some(job.request_id.clone())).records)?;
        Ok(())
    }
}

pub fn router(app: App) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/queue", get(queue))
        .route("/verdicts", post(verdicts))
        .route("/kb/categories/{name}/instances", get(category_instances))
        .route("/kb/relations/{name}/instances", get(relation_instances))
        .route("/kb/provenance", get(provenance_of))
        .route("/iterations", post(start_iteration))
        .route("/iterations/{n}", get(iteration))
        .with_state(app)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, app: App) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    axum::serve(listener, router(app)).await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

fn evidence_json(evidence: &[(PatternKey, u64)]) -> Vec<Value> {
    evidence
        .iter()
        .map(|(p, count)| {
            json!({
                "pattern": p.to_string(),
                "side": p.side.map(|s| s.code()),
                "tp": p.tp,
                "count": count,
            })
        })
        .collect()
}

fn args_json(args: &Args) -> Vec<&str> {
    args.parts()
}

fn human_readable(kb: &KnowledgeBase, key: &FactKey) -> String {
    kb.ontology()
        .human_format(&key.predicate)
        .map(|t| key.args.render(t))
        .unwrap_or_else(|| key.to_string())
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|s| !s.is_empty())
}

#[derive(Debug, Serialize)]
struct StatusBody {
    iteration: u32,
    counts: BTreeMap<&'static str, usize>,
    pending_count: usize,
    running: Option<u32>,
    profile: Option<String>,
    last_error: Option<String>,
}

async fn status(State(app): State<App>) -> Json<StatusBody> {
    let kb = app.snapshot();
    let jobs = app.jobs();
    Json(StatusBody {
        iteration: kb.iteration(),
        counts: kb.status_counts().into_iter().map(|(s, n)| (s.as_str(), n)).collect(),
        pending_count: kb.queue().count(),
        running: jobs.running.as_ref().map(|j| j.n),
        profile: kb.profile().map(ToString::to_string),
        last_error: jobs.last_failure.as_ref().map(|f| f.error.clone()),
    })
}

#[derive(Debug, Deserialize)]
struct QueueQuery {
    predicate: Option<String>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueueItem {
    pub id: String,
    pub predicate: String,
    pub args: Vec<String>,
    pub score: u32,
    pub evidence: Vec<Value>,
    pub human_readable: String,
    pub queued_at: u32,
    pub timestamp: String,
}

fn known_predicate(kb: &KnowledgeBase, name: &str) -> Result<PredicateKind> {
    kb.ontology()
        .kind_of(name)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown predicate `{name}`")))
}

async fn queue(State(app): State<App>, Query(q): Query<QueueQuery>) -> Result<Json<Value>> {
    let kb = app.snapshot();
    let predicate = non_empty(q.predicate);
    if let Some(p) = &predicate {
        known_predicate(&kb, p)?;
    }
    let mut entries: Vec<_> = kb
        .queue()
        .filter(|e| predicate.as_ref().is_none_or(|p| &e.key.predicate == p))
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then_with(|| a.key.predicate.cmp(&b.key.predicate))
            .then_with(|| a.key.args.parts().cmp(&b.key.args.parts()))
    });
    let pending_count = entries.len();
    let items: Vec<QueueItem> = entries
        .into_iter()
        .take(q.limit.unwrap_or(usize::MAX))
        .map(|e| QueueItem {
            id: e.key.id(),
            predicate: e.key.predicate.clone(),
            args: e.key.args.parts().into_iter().map(String::from).collect(),
            score: e.score,
            evidence: evidence_json(&e.evidence),
            human_readable: human_readable(&kb, &e.key),
            queued_at: e.queued_at,
            timestamp: format_time(e.timestamp),
        })
        .collect();
    Ok(Json(json!({ "items": items, "pending_count": pending_count })))
}

#[derive(Debug, Deserialize)]
struct VerdictBody {
    id: String,
    decision: String,
    supervisor: String,
    request_id: Option<String>,
}

/// Queued candidates and judgeable assertions addressable by id.
fn find_target(kb: &KnowledgeBase, id: &str) -> Option<FactKey> {
    kb.queue()
        .map(|e| e.key.clone())
        .chain(kb.assertions().map(|a| a.key()))
        .find(|k| k.id() == id)
}

fn verdict_response(kb: &KnowledgeBase, v: &Verdict) -> Value {
    json!({
        "id": v.key.id(),
        "predicate": v.key.predicate,
        "args": args_json(&v.key.args),
        "decision": v.decision.as_str(),
        "status": kb.assertion(&v.key).map(|a| a.status.as_str()),
        "supervisor": v.supervisor,
        "request_id": v.request_id,
        "timestamp": format_time(v.timestamp),
    })
}

/// A request id already committed: the same verdict replays its response,
/// anything else is a conflict.
fn replayed_verdict(kb: &KnowledgeBase, body: &VerdictBody, decision: Decision) -> Result<Option<Value>> {
    let Some(rid) = &body.request_id else {
        return Ok(None);
    };
    match kb.request(rid) {
        None => Ok(None),
        Some(Record::Verdict(v)) if v.key.id() == body.id && v.decision == decision => {
            Ok(Some(verdict_response(kb, v)))
        }
        Some(_) => Err(ServiceError::Conflict(format!(
            "request id `{rid}` was already used for a different request"
        ))),
    }
}

async fn verdicts(State(app): State<App>, Json(body): Json<VerdictBody>) -> Result<Json<Value>> {
    let decision = Decision::parse(&body.decision).map_err(ServiceError::BadRequest)?;
    if body.supervisor.trim().is_empty() {
        return Err(ServiceError::BadRequest("supervisor must not be empty".into()));
    }
    let body = VerdictBody {
        request_id: non_empty(body.request_id),
        ..body
    };
    if let Some(done) = replayed_verdict(&app.snapshot(), &body, decision)? {
        return Ok(Json(done));
    }
    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let mut writer = worker.writer();
        // A concurrent retry may have committed while this one waited.
        if let Some(done) = replayed_verdict(writer.kb(), &body, decision)? {
            return Ok(Json(done));
        }
        let key = find_target(writer.kb(), &body.id)
            .ok_or_else(|| ServiceError::NotFound(format!("no queued candidate or assertion with id `{}`", body.id)))?;
        let verdict = Verdict {
            key,
            decision,
            supervisor: body.supervisor.clone(),
            request_id: body.request_id.clone(),
            timestamp: Utc::now(),
        };
        writer.commit(vec![Record::Verdict(verdict.clone())])?;
        Ok(Json(verdict_response(writer.kb(), &verdict)))
    })
    .await
    .map_err(|e| ServiceError::Worker(e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct InstancesQuery {
    status: Option<String>,
}

fn instances(kb: &KnowledgeBase, name: &str, kind: PredicateKind, q: InstancesQuery) -> Result<Json<Value>> {
    if known_predicate(kb, name)? != kind {
        return Err(ServiceError::NotFound(format!("`{name}` is not a {}", kind.as_str())));
    }
    let status = non_empty(q.status)
        .map(|s| Status::parse(&s))
        .transpose()
        .map_err(ServiceError::BadRequest)?;
    let items: Vec<Value> = kb
        .instances(name, status)
        .into_iter()
        .map(|a| {
            json!({
                "id": a.key().id(),
                "args": args_json(&a.args),
                "status": a.status.as_str(),
                "score": a.score,
                "iteration": a.iteration,
                "evidence": evidence_json(&a.evidence),
                "human_readable": human_readable(kb, &a.key()),
                "timestamp": format_time(a.timestamp),
            })
        })
        .collect();
    Ok(Json(json!({ "predicate": name, "kind": kind.as_str(), "instances": items })))
}

async fn category_instances(
    State(app): State<App>,
    Path(name): Path<String>,
    Query(q): Query<InstancesQuery>,
) -> Result<Json<Value>> {
    instances(&app.snapshot(), &name, PredicateKind::Category, q)
}

async fn relation_instances(
    State(app): State<App>,
    Path(name): Path<String>,
    Query(q): Query<InstancesQuery>,
) -> Result<Json<Value>> {
    instances(&app.snapshot(), &name, PredicateKind::Relation, q)
}

#[derive(Debug, Deserialize)]
struct ProvenanceQuery {
    predicate: String,
    args: String,
}

fn record_json(record: &Record) -> Value {
    let mut v = match record {
        Record::Assert(a) => json!({
            "status": a.status.as_str(),
            "score": a.score,
            "iteration": a.iteration,
            "evidence": evidence_json(&a.evidence),
        }),
        Record::Queue(q) => json!({
            "score": q.score,
            "queued_at": q.queued_at,
            "evidence": evidence_json(&q.evidence),
        }),
        Record::Dequeue(d) => json!({ "reason": d.reason.as_str(), "iteration": d.iteration }),
        Record::Verdict(v) => json!({
            "decision": v.decision.as_str(),
            "supervisor": v.supervisor,
            "request_id": v.request_id,
        }),
        _ => json!({}),
    };
    v["type"] = json!(record.type_name());
    v["timestamp"] = json!(record.timestamp().map(format_time));
    v
}

async fn provenance_of(State(app): State<App>, Query(q): Query<ProvenanceQuery>) -> Result<Json<Value>> {
    let kb = app.snapshot();
    let kind = known_predicate(&kb, &q.predicate)?;
    // Relation args are `left,right`; the first comma separates them.
    let args = match kind {
        PredicateKind::Category => Args::One(q.args.clone()),
        PredicateKind::Relation => match q.args.split_once(',') {
            Some((a, b)) => Args::Two(a.into(), b.into()),
            None => return Err(ServiceError::BadRequest("relation args must be `left,right`".into())),
        },
    };
    let records: Vec<Value> = provenance(&kb, &q.predicate, &args).iter().map(record_json).collect();
    Ok(Json(json!({
        "predicate": q.predicate,
        "args": args_json(&args),
        "id": FactKey::new(q.predicate.clone(), args.clone()).id(),
        "records": records,
    })))
}

#[derive(Debug, Deserialize)]
struct IterationRequest {
    request_id: String,
}

async fn start_iteration(State(app): State<App>, Json(req): Json<IterationRequest>) -> Result<Response> {
    if req.request_id.is_empty() {
        return Err(ServiceError::BadRequest("request_id must not be empty".into()));
    }
    let kb = app.snapshot();
    match kb.request(&req.request_id) {
        Some(Record::Iteration(it)) => {
            let body = json!({ "n": it.n, "state": "done", "request_id": req.request_id });
            return Ok((StatusCode::OK, Json(body)).into_response());
        }
        Some(_) => {
            return Err(ServiceError::Conflict(format!(
                "request id `{}` was already used for a different request",
                req.request_id
            )))
        }
        None => {}
    }
    let job = {
        let mut jobs = app.jobs();
        if let Some(running) = &jobs.running {
            if running.request_id == req.request_id {
                let body = json!({ "n": running.n, "state": "running", "request_id": req.request_id });
                return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
            }
            return Err(ServiceError::Conflict(format!("iteration {} is already running", running.n)));
        }
        if app.inner.table.is_none() {
            return Err(ServiceError::Unavailable("no all-pairs table loaded".into()));
        }
        let job = Job {
            n: kb.iteration() + 1,
            request_id: req.request_id.clone(),
        };
        jobs.running = Some(job.clone());
        job
    };
    let worker = app.clone();
    let spawned = job.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = worker.run_job(&spawned);
        let mut jobs = worker.jobs();
        jobs.running = None;
        if let Err(e) = outcome {
            log::warn!("iteration {} failed: {e}", spawned.n);
            jobs.last_failure = Some(Failure {
                n: spawned.n,
                request_id: spawned.request_id,
                error: e.to_string(),
            });
        }
    });
    let body = json!({ "n": job.n, "state": "running", "request_id": job.request_id });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn iteration(State(app): State<App>, Path(n): Path<u32>) -> Result<Json<Value>> {
    let jobs = app.jobs();
    let kb = app.snapshot();
    if let Some(it) = kb.iteration_record(n) {
        return Ok(Json(json!({
            "n": it.n,
            "state": "done",
            "request_id": it.request_id,
            "promoted": it.promoted,
            "queued": it.queued,
            "deferred": it.deferred,
            "profile": it.profile.to_string(),
            "corpus": it.corpus.to_string(),
            "timestamp": format_time(it.timestamp),
        })));
    }
    if let Some(job) = jobs.running.as_ref().filter(|j| j.n == n) {
        return Ok(Json(json!({ "n": n, "state": "running", "request_id": job.request_id })));
    }
    if let Some(f) = jobs.last_failure.as_ref().filter(|f| f.n == n) {
        return Ok(Json(json!({
            "n": n,
            "state": "failed",
            "request_id": f.request_id,
            "error": f.error,
        })));
    }
    Err(ServiceError::NotFound(format!("no iteration {n}")))
}
