//! HTTP review service.
//!
//! A reviewer opens a session for one reviewed configuration and walks a
//! shuffled queue of test cases. For each case the service shows the image and
//! the flagged labels (with guidance in `confguide` sessions) and accepts one
//! present/absent verdict per flagged label. Ground truth is never exposed.
//!
//! Routes:
//!
//! | method | path | purpose |
//! |---|---|---|
//! | POST | `/sessions` | open a session `{reviewer_id, config}` |
//! | GET | `/sessions/{sid}/cases` | the session's case queue |
//! | GET | `/cases/{cid}?session={sid}` | case payload for review |
//! | POST | `/sessions/{sid}/cases/{cid}/decision` | submit `{verdicts: {label: verdict}}` |
//! | GET | `/metrics?config=..[&session=..]` | metrics over completed cases |
//! | GET | `/progress/{sid}` | completed / total |
//! | GET | `/images/{cid}` | the case image |
//!
//! Errors are JSON `{code, message}`. Decisions are final: a second submission
//! for the same case in the same session is rejected with 409. Sessions are
//! persisted to `review_sessions.json` and every accepted decision is appended
//! to `review_decisions.jsonl` in the output directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::decision::{review_case_by_name, DecisionConfig, DecisionRecord, Verdict};
use crate::endpoint::{is_remote_reference, load_image, ImageData};
use crate::error::Error;
use crate::evaluation::{evaluate_decisions, MetricReport};
use crate::guidance::{GuidanceStatus, GuidanceStore, View};
use crate::ingestion::{CaseManifest, LabelMatrix, LabelSchema};
use crate::jsonl::append_jsonl;
use crate::pipeline::ReviewInputs;
use crate::riskcontrol::PredictionSet;

pub const SESSIONS_FILE: &str = "review_sessions.json";
pub const DECISIONS_FILE: &str = "review_decisions.jsonl";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::VerdictOutsideSet(_) => Self::new(StatusCode::CONFLICT, "not_flagged", e.to_string()),
            Error::IncompleteReview(_) | Error::UnknownLabel(_) => Self::unprocessable(e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub reviewer_id: String,
    pub config: DecisionConfig,
    pub queue: Vec<String>,
    pub completed: BTreeMap<String, DecisionRecord>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct PersistedSessions {
    next_id: u64,
    sessions: Vec<Session>,
}

struct ServiceState {
    schema: LabelSchema,
    manifest: CaseManifest,
    image_base: PathBuf,
    view: View,
    sets: Vec<PredictionSet>,
    set_index: HashMap<String, usize>,
    guidance: Option<GuidanceStore>,
    labels: LabelMatrix,
    out_dir: PathBuf,
    seed: u64,
    next_id: u64,
    sessions: BTreeMap<String, Session>,
}

impl ServiceState {
    fn persist(&self) -> ApiResult<()> {
        let snapshot = PersistedSessions {
            next_id: self.next_id,
            sessions: self.sessions.values().cloned().collect(),
        };
        let path = self.out_dir.join(SESSIONS_FILE);
        let text = serde_json::to_string_pretty(&snapshot).expect("sessions serialize");
        fs::write(&path, text + "\n")
            .map_err(|e| ApiError::internal(format!("cannot write {}: {e}", path.display())))
    }

    fn session(&self, sid: &str) -> ApiResult<&Session> {
        self.sessions
            .get(sid)
            .ok_or_else(|| ApiError::not_found(format!("unknown session {sid:?}")))
    }

    fn set(&self, cid: &str) -> ApiResult<&PredictionSet> {
        self.set_index
            .get(cid)
            .map(|&i| &self.sets[i])
            .ok_or_else(|| ApiError::not_found(format!("unknown case {cid:?}")))
    }
}

/// Shared handle to the review service.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<ServiceState>>,
    token: Option<Arc<str>>,
}

/// Settings for [`AppState::new`].
pub struct ServiceOptions {
    pub out_dir: PathBuf,
    pub image_base: PathBuf,
    pub view: View,
    pub seed: u64,
    /// Bearer token required on every request, if set.
    pub token: Option<String>,
}

impl AppState {
    /// Builds the service, resuming sessions saved in `out_dir`.
    pub fn new(inputs: ReviewInputs, options: ServiceOptions) -> crate::Result<Self> {
        let set_index = inputs
            .sets
            .iter()
            .enumerate()
            .map(|(i, s)| (s.case_id.clone(), i))
            .collect();
        let saved_path = options.out_dir.join(SESSIONS_FILE);
        let saved: PersistedSessions = match fs::read_to_string(&saved_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::parse(saved_path.display().to_string(), e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => PersistedSessions::default(),
            Err(e) => return Err(Error::io(&saved_path, e)),
        };
        let state = ServiceState {
            schema: inputs.schema,
            manifest: inputs.manifest,
            image_base: options.image_base,
            view: options.view,
            sets: inputs.sets,
            set_index,
            guidance: inputs.guidance,
            labels: inputs.test.labels,
            out_dir: options.out_dir,
            seed: options.seed,
            next_id: saved.next_id,
            sessions: saved
                .sessions
                .into_iter()
                .map(|s| (s.session_id.clone(), s))
                .collect(),
        };
        Ok(Self {
            inner: Arc::new(Mutex::new(state)),
            token: options.token.map(Into::into),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ServiceState> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{sid}/cases", get(session_cases))
        .route("/sessions/{sid}/cases/{cid}/decision", post(submit_decision))
        .route("/cases/{cid}", get(case_detail))
        .route("/metrics", get(metrics))
        .route("/progress/{sid}", get(progress))
        .route("/images/{cid}", get(image))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let supplied = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if supplied != Some(token.as_ref()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("invalid request body: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    reviewer_id: String,
    config: String,
}

#[derive(Serialize)]
struct SessionSummary {
    session_id: String,
    reviewer_id: String,
    config: DecisionConfig,
    n_cases: usize,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = parse_body(&body)?;
    if req.reviewer_id.trim().is_empty() {
        return Err(ApiError::unprocessable("reviewer_id must not be empty"));
    }
    let config: DecisionConfig = req
        .config
        .parse()
        .map_err(|e: Error| ApiError::unprocessable(e.to_string()))?;
    if !config.is_reviewed() {
        return Err(ApiError::unprocessable(format!(
            "{config} is not a reviewed configuration; use crc_plus_plus or confguide"
        )));
    }
    let mut st = state.lock();
    if config == DecisionConfig::Confguide && st.guidance.is_none() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "guidance_missing",
            "no guidance has been generated; run `confguide guide` first",
        ));
    }
    let counter = st.next_id;
    st.next_id += 1;
    let session_id = format!("s{counter:04}");
    let mut queue: Vec<String> = st.sets.iter().map(|s| s.case_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(st.seed.wrapping_add(counter));
    queue.shuffle(&mut rng);
    let session = Session {
        session_id: session_id.clone(),
        reviewer_id: req.reviewer_id,
        config,
        queue,
        completed: BTreeMap::new(),
    };
    let summary = SessionSummary {
        session_id: session_id.clone(),
        reviewer_id: session.reviewer_id.clone(),
        config,
        n_cases: session.queue.len(),
    };
    st.sessions.insert(session_id, session);
    st.persist()?;
    Ok((StatusCode::CREATED, Json(summary)))
}

#[derive(Serialize)]
struct QueueEntry {
    case_id: String,
    n_flagged: usize,
    completed: bool,
}

async fn session_cases(State(state): State<AppState>, UrlPath(sid): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let st = state.lock();
    let session = st.session(&sid)?;
    let cases: Vec<QueueEntry> = session
        .queue
        .iter()
        .map(|cid| QueueEntry {
            case_id: cid.clone(),
            n_flagged: st.set(cid).map_or(0, |s| s.len()),
            completed: session.completed.contains_key(cid),
        })
        .collect();
    Ok(Json(json!({ "session_id": sid, "config": session.config, "cases": cases })))
}

#[derive(Deserialize)]
struct CaseQuery {
    session: Option<String>,
}

#[derive(Serialize)]
struct GuidanceView {
    favor: String,
    against: String,
    status: GuidanceStatus,
}

#[derive(Serialize)]
struct FlaggedLabel {
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    guidance: Option<GuidanceView>,
}

#[derive(Serialize)]
struct CasePayload {
    case_id: String,
    image_url: String,
    view: View,
    flagged: Vec<FlaggedLabel>,
    completed: bool,
}

async fn case_detail(
    State(state): State<AppState>,
    UrlPath(cid): UrlPath<String>,
    Query(query): Query<CaseQuery>,
) -> ApiResult<Json<CasePayload>> {
    let st = state.lock();
    let sid = query
        .session
        .ok_or_else(|| ApiError::unprocessable("the `session` query parameter is required"))?;
    let session = st.session(&sid)?;
    let set = st.set(&cid)?;
    let show_guidance = session.config == DecisionConfig::Confguide;
    let flagged = set
        .members
        .iter()
        .map(|&class| {
            let label = st.schema.name(class).to_string();
            let guidance = if show_guidance {
                st.guidance.as_ref().and_then(|g| g.lookup(&cid, &label)).map(|r| GuidanceView {
                    favor: r.favor.clone(),
                    against: r.against.clone(),
                    status: r.status,
                })
            } else {
                None
            };
            FlaggedLabel { label, guidance }
        })
        .collect();
    Ok(Json(CasePayload {
        image_url: format!("/images/{cid}"),
        view: st.view,
        flagged,
        completed: session.completed.contains_key(&cid),
        case_id: cid,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    verdicts: BTreeMap<String, Verdict>,
}

#[derive(Serialize)]
struct StoredDecision<'a> {
    session_id: &'a str,
    #[serde(flatten)]
    record: &'a DecisionRecord,
}

async fn submit_decision(
    State(state): State<AppState>,
    UrlPath((sid, cid)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: DecisionBody = parse_body(&body)?;
    let mut st = state.lock();
    let session = st.session(&sid)?;
    if !session.queue.contains(&cid) {
        return Err(ApiError::not_found(format!("case {cid:?} is not in session {sid:?}")));
    }
    if session.completed.contains_key(&cid) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "already_decided",
            format!("case {cid:?} was already decided in this session"),
        ));
    }
    let set = st.set(&cid)?;
    let record = review_case_by_name(set, &st.schema, &req.verdicts, session.config, &session.reviewer_id)?;
    append_jsonl(
        &st.out_dir.join(DECISIONS_FILE),
        &StoredDecision {
            session_id: &sid,
            record: &record,
        },
    )
    .map_err(|e| ApiError::internal(e.to_string()))?;
    st.sessions
        .get_mut(&sid)
        .expect("session checked above")
        .completed
        .insert(cid, record.clone());
    st.persist()?;
    Ok((StatusCode::CREATED, Json(record)))
}

#[derive(Deserialize)]
struct MetricsQuery {
    config: String,
    session: Option<String>,
}

/// Metrics over completed cases. Across several sessions of one
/// configuration, each case counts once, taking the earliest session's
/// decision.
async fn metrics(State(state): State<AppState>, Query(query): Query<MetricsQuery>) -> ApiResult<Json<MetricReport>> {
    let config: DecisionConfig = query
        .config
        .parse()
        .map_err(|e: Error| ApiError::unprocessable(e.to_string()))?;
    let st = state.lock();
    let sessions: Vec<&Session> = match &query.session {
        Some(sid) => {
            let s = st.session(sid)?;
            if s.config != config {
                return Err(ApiError::unprocessable(format!(
                    "session {sid:?} uses {}, not {config}",
                    s.config
                )));
            }
            vec![s]
        }
        None => st.sessions.values().filter(|s| s.config == config).collect(),
    };
    let mut by_case: BTreeMap<&str, &DecisionRecord> = BTreeMap::new();
    for s in &sessions {
        for (cid, record) in &s.completed {
            by_case.entry(cid.as_str()).or_insert(record);
        }
    }
    let ids: Vec<String> = by_case.keys().map(|s| s.to_string()).collect();
    let decisions: Vec<DecisionRecord> = by_case.into_values().cloned().collect();
    let labels = st.labels.subset(&ids)?;
    let mut report = evaluate_decisions(&decisions, &labels, &st.schema)?;
    report.config = Some(config);
    if let [only] = sessions.as_slice() {
        report.reviewer_id = only.reviewer_id.clone();
    }
    Ok(Json(report))
}

async fn progress(State(state): State<AppState>, UrlPath(sid): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let st = state.lock();
    let s = st.session(&sid)?;
    let completed = s.completed.len();
    let total = s.queue.len();
    Ok(Json(json!({
        "session_id": sid,
        "completed": completed,
        "total": total,
        "remaining": total - completed,
    })))
}

async fn image(State(state): State<AppState>, UrlPath(cid): UrlPath<String>) -> ApiResult<Response> {
    let (entry, base) = {
        let st = state.lock();
        st.set(&cid)?;
        let entry = st
            .manifest
            .get(&cid)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("case {cid:?} has no image")))?;
        (entry, st.image_base.clone())
    };
    if is_remote_reference(&entry.image) && !entry.image.starts_with("data:") {
        return Ok((StatusCode::TEMPORARY_REDIRECT, [(header::LOCATION, entry.image)]).into_response());
    }
    match load_image(&entry, &base) {
        Ok(ImageData::Inline { mime, bytes }) => Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response()),
        Ok(ImageData::Url(url)) => Ok((StatusCode::TEMPORARY_REDIRECT, [(header::LOCATION, url)]).into_response()),
        Err(e) => Err(ApiError::not_found(e.to_string())),
    }
}

/// Serves the API until Ctrl-C.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!("review API listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

