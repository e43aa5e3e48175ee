//! HTTP service for live labeling sessions on one seed of a pipeline run.
//!
//! Writes to a session (suggest, decide, update, rename) go through a
//! per-session FIFO lock; reads serve the snapshot taken after the last write.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use tdg_core::amenability::{GateVerdict, SelectionResult};
use tdg_core::augment::{Candidate, CandidateStatus};
use tdg_core::discovery::ClusterProfile;
use tdg_core::error::TdgError;
use tdg_core::run::{parse_live_session_id, LiveContext};
use tdg_core::session::{EventLog, Session, SessionStatus, SessionView, UpdateScope};

pub const TOKEN_ENV: &str = "TDG_AUTH_TOKEN";
pub const PORT_ENV: &str = "TDG_PORT";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub token: String,
    /// Shown to clients; not enforced.
    pub time_budget_minutes: u32,
}

impl ServerConfig {
    /// Read the bearer token from the environment.
    pub fn from_env() -> Result<Self, String> {
        let token = std::env::var(TOKEN_ENV).map_err(|_| format!("{TOKEN_ENV} must be set"))?;
        if token.trim().is_empty() {
            return Err(format!("{TOKEN_ENV} must not be empty"));
        }
        Ok(ServerConfig {
            token,
            time_budget_minutes: 90,
        })
    }
}

pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(p) => p.parse().map_err(|_| format!("{PORT_ENV}={p:?} is not a port")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

/// Which actions would currently succeed; clients disable the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actions {
    pub suggest: bool,
    pub decide: bool,
    pub update_local: bool,
    pub update_global: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    #[serde(flatten)]
    pub view: SessionView,
    pub update_in_flight: bool,
    pub actions: Actions,
    pub time_budget_minutes: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuggestionsResponse {
    pub session_id: String,
    pub local_version: String,
    pub global_version: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub candidate_id: String,
    /// `null` abstains.
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub candidate_id: String,
    pub status: CandidateStatus,
    pub session: SessionResponse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateRequest {
    pub scope: UpdateScope,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateResponse {
    pub scope: UpdateScope,
    pub version_id: String,
    pub session: SessionResponse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub cluster_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenameRequest {
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResponse {
    pub seed: u64,
    pub selection: SelectionResult,
    pub clusters: Vec<ClusterProfile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub cluster_id: usize,
    pub name: Option<String>,
    pub status: SessionStatus,
    pub accepted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    /// Set when repeating the same request may succeed.
    pub retry: bool,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: code.into(),
                message: message.into(),
                retry: status == StatusCode::BAD_GATEWAY,
            },
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<TdgError> for ApiError {
    fn from(e: TdgError) -> Self {
        let msg = e.to_string();
        match e {
            TdgError::NotFound(_) => Self::not_found(msg),
            TdgError::Conflict(_) => Self::conflict(msg),
            TdgError::Contract(_) | TdgError::Config(_) | TdgError::Size(_) | TdgError::Parse { .. } => {
                Self::new(StatusCode::BAD_REQUEST, "bad_request", msg)
            }
            TdgError::Generator(_) => Self::new(StatusCode::BAD_GATEWAY, "generator", msg),
            _ => {
                tracing::error!(error = %msg, "internal error");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let retry = self.body.retry;
        let mut res = (self.status, Json(self.body)).into_response();
        if retry {
            res.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("5"));
        }
        res
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// One live session: the write lock, the read snapshot, and the update flag.
pub struct Slot {
    session: Arc<Mutex<Session>>,
    view: RwLock<Arc<SessionResponse>>,
    updating: AtomicBool,
    cluster_id: usize,
}

/// Held while a model update runs; dropping it clears the flag.
pub struct UpdateGuard(Arc<Slot>);

impl Drop for UpdateGuard {
    fn drop(&mut self) {
        self.0.updating.store(false, Ordering::Release);
    }
}

impl Slot {
    /// Claim the session's single update slot, or `None` if one is in flight.
    pub fn begin_update(self: &Arc<Self>) -> Option<UpdateGuard> {
        self.updating
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| UpdateGuard(self.clone()))
    }

    pub fn snapshot(&self) -> Arc<SessionResponse> {
        self.view.read().expect("snapshot lock").clone()
    }
}

pub struct AppState {
    live: Arc<LiveContext>,
    sessions: RwLock<BTreeMap<String, Arc<Slot>>>,
    create_lock: Mutex<()>,
    dir: PathBuf,
    config: ServerConfig,
}

fn blocking_err(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("worker failed: {e}"))
}

impl AppState {
    /// Open the state, replaying any sessions already logged under `dir`.
    pub fn open(live: LiveContext, dir: impl AsRef<Path>, config: ServerConfig) -> Result<Arc<Self>, TdgError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let state = AppState {
            live: Arc::new(live),
            sessions: RwLock::new(BTreeMap::new()),
            create_lock: Mutex::new(()),
            dir,
            config,
        };
        let mut logs: Vec<PathBuf> = std::fs::read_dir(&state.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        for p in logs {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            match parse_live_session_id(&stem) {
                Some((seed, _, _)) if seed == state.live.seed => {}
                _ => continue,
            }
            let s = Session::replay(&state.live.ctx(), &EventLog::read(&p)?)?;
            let s = s.with_log(EventLog::new(&p));
            tracing::info!(session = %stem, "restored");
            state.insert(s)?;
        }
        Ok(Arc::new(state))
    }

    fn insert(&self, session: Session) -> Result<Arc<Slot>, TdgError> {
        let id = session.id().to_owned();
        let slot = Arc::new(Slot {
            cluster_id: session.spec.cluster_id,
            view: RwLock::new(Arc::new(self.respond(&session, false))),
            session: Arc::new(Mutex::new(session)),
            updating: AtomicBool::new(false),
        });
        self.write_snapshot(&slot.snapshot())?;
        self.sessions.write().expect("session map").insert(id, slot.clone());
        Ok(slot)
    }

    pub fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.sessions.read().expect("session map").get(id).cloned()
    }

    fn get_slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.slot(id).ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }

    fn respond(&self, s: &Session, update_in_flight: bool) -> SessionResponse {
        let active = s.status == SessionStatus::Active;
        let can_update = active && !update_in_flight && !s.accepted.is_empty();
        SessionResponse {
            view: s.view(),
            update_in_flight,
            actions: Actions {
                suggest: active && (!s.pending.is_empty() || s.proposals_left() > 0),
                decide: active && !s.pending.is_empty() && s.labels_left() > 0,
                update_local: can_update,
                update_global: can_update && s.global_updates_left() > 0,
            },
            time_budget_minutes: self.config.time_budget_minutes,
        }
    }

    fn write_snapshot(&self, r: &SessionResponse) -> Result<(), TdgError> {
        let p = self.dir.join(format!("{}.snapshot.json", r.view.session_id));
        let tmp = p.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(r)?)?;
        std::fs::rename(&tmp, &p)?;
        Ok(())
    }

    /// Refresh the read snapshot after a write.
    fn publish(&self, slot: &Slot, s: &Session) -> ApiResult<SessionResponse> {
        let r = self.respond(s, slot.updating.load(Ordering::Acquire));
        self.write_snapshot(&r)?;
        *slot.view.write().expect("snapshot lock") = Arc::new(r.clone());
        Ok(r)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/suggestions", get(get_suggestions))
        .route("/sessions/{id}/decisions", post(post_decision))
        .route("/sessions/{id}/updates", post(post_update))
        .route("/sessions/{id}/name", patch(patch_name))
        .route("/selection", get(get_selection))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .merge(api)
        .with_state(state)
}

/// Bind and serve until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn same_bytes(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| same_bytes(t.as_bytes(), state.config.token.as_bytes()));
    if !ok {
        return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
    }
    next.run(req).await
}

async fn create_session(State(state): State<Arc<AppState>>, Json(req): Json<CreateRequest>) -> ApiResult<(StatusCode, Json<SessionResponse>)> {
    let live = state.live.clone();
    let sel = &live.selection;
    if req.cluster_id >= live.discovery.clusters.k {
        return Err(ApiError::not_found(format!("cluster {}", req.cluster_id)));
    }
    if sel.verdict == GateVerdict::RejectHighInterference {
        return Err(ApiError::conflict(format!(
            "augmentation refused for this task: high interference (ic {:.4} above the gate)",
            sel.ic_bar
        )));
    }
    if !sel.clusters.contains(&req.cluster_id) {
        return Err(ApiError::conflict(format!("cluster {} was not selected for augmentation", req.cluster_id)));
    }
    let _creating = state.create_lock.lock().await;
    let existing: Vec<Arc<Slot>> = state
        .sessions
        .read()
        .expect("session map")
        .values()
        .filter(|s| s.cluster_id == req.cluster_id)
        .cloned()
        .collect();
    if let Some(active) = existing.iter().find(|s| s.snapshot().view.status == SessionStatus::Active) {
        return Err(ApiError::conflict(format!(
            "cluster {} already has an active session {}",
            req.cluster_id,
            active.snapshot().view.session_id
        )));
    }
    let spec = live.spec(req.cluster_id, existing.len());
    let log = EventLog::new(state.dir.join(format!("{}.jsonl", spec.session_id)));
    if log.path().exists() {
        std::fs::remove_file(log.path()).map_err(TdgError::from)?;
    }
    let session = tokio::task::spawn_blocking(move || Session::create(&live.ctx(), spec, Some(log)))
        .await
        .map_err(blocking_err)??;
    let slot = state.insert(session)?;
    Ok((StatusCode::CREATED, Json((*slot.snapshot()).clone())))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    let slots: Vec<Arc<Slot>> = state.sessions.read().expect("session map").values().cloned().collect();
    Json(
        slots
            .iter()
            .map(|s| {
                let v = &s.snapshot().view;
                SessionSummary {
                    session_id: v.session_id.clone(),
                    cluster_id: v.cluster_id,
                    name: v.name.clone(),
                    status: v.status,
                    accepted: v.accepted.len(),
                }
            })
            .collect(),
    )
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionResponse>> {
    let slot = state.get_slot(&id)?;
    let mut r = (*slot.snapshot()).clone();
    r.update_in_flight = slot.updating.load(Ordering::Acquire);
    if r.update_in_flight {
        r.actions.update_local = false;
        r.actions.update_global = false;
    }
    Ok(Json(r))
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    n: Option<usize>,
    #[serde(default)]
    fresh: bool,
}

async fn get_suggestions(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SuggestQuery>,
) -> ApiResult<Json<SuggestionsResponse>> {
    let slot = state.get_slot(&id)?;
    let n = q.n.unwrap_or(8);
    let mut guard = slot.session.clone().lock_owned().await;
    let live = state.live.clone();
    let (guard, res) = tokio::task::spawn_blocking(move || {
        let res = guard.suggest(&live.ctx(), n, q.fresh);
        (guard, res)
    })
    .await
    .map_err(blocking_err)?;
    let snapshot = state.publish(&slot, &guard);
    let candidates = res?;
    snapshot?;
    Ok(Json(SuggestionsResponse {
        session_id: id,
        local_version: guard.local.version_id.clone(),
        global_version: guard.global.version_id.clone(),
        candidates,
    }))
}

async fn post_decision(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Json<DecisionResponse>> {
    let slot = state.get_slot(&id)?;
    let mut guard = slot.session.clone().lock_owned().await;
    let status = guard.decide(&state.live.ctx(), &req.candidate_id, req.label.as_deref())?;
    let session = state.publish(&slot, &guard)?;
    Ok(Json(DecisionResponse {
        candidate_id: req.candidate_id,
        status,
        session,
    }))
}

async fn post_update(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<UpdateRequest>,
) -> ApiResult<Json<UpdateResponse>> {
    let slot = state.get_slot(&id)?;
    let Some(flag) = slot.begin_update() else {
        return Err(ApiError::conflict("a model update is already in flight for this session"));
    };
    let mut guard = slot.session.clone().lock_owned().await;
    let live = state.live.clone();
    let scope = req.scope;
    let (guard, res) = tokio::task::spawn_blocking(move || {
        let res = guard.update(&live.ctx(), scope);
        (guard, res)
    })
    .await
    .map_err(blocking_err)?;
    drop(flag);
    let version_id = res?;
    let session = state.publish(&slot, &guard)?;
    Ok(Json(UpdateResponse {
        scope,
        version_id,
        session,
    }))
}

async fn patch_name(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<RenameRequest>,
) -> ApiResult<Json<SessionResponse>> {
    let slot = state.get_slot(&id)?;
    let mut guard = slot.session.lock().await;
    guard.rename(&req.name)?;
    Ok(Json(state.publish(&slot, &guard)?))
}

async fn get_selection(State(state): State<Arc<AppState>>) -> Json<SelectionResponse> {
    let live = &state.live;
    let clusters = live
        .discovery
        .profiles
        .iter()
        .filter(|p| live.selection.clusters.contains(&p.cluster_id))
        .cloned()
        .collect();
    Json(SelectionResponse {
        seed: live.seed,
        selection: live.selection.clone(),
        clusters,
    })
}
