//! HTTP front for an experiment that waits on human answers.
//!
//! Endpoints:
//! - `POST /sessions` with `{"experiment": "<dir>", "advance": false}`
//! - `GET /sessions/{id}/queries?limit=N`, one JSON object per line
//! - `POST /sessions/{id}/labels` with `{"query_id": 3, "class": "salient"}`,
//!   or several such objects one per line
//! - `GET /sessions/{id}/status`
//!
//! Answers are on disk before they are acknowledged. When the last pending
//! query of a batch is answered the next round starts in the background.

pub mod render;

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use atal_core::engine::{Engine, Phase, RoundMetrics};
use atal_core::grid::Image;
use atal_core::labels::Class;
use atal_core::oracle::{AnswerSource, LabelQuery};
use atal_core::superpixel::SuperpixelPartition;
use atal_core::Error;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::{Deserialize, Serialize};

/// Environment variable holding the listen address.
pub const BIND_ENV: &str = "ATAL_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn no_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("session {id} not found"))
    }

    fn kind(&self) -> &'static str {
        match self.status {
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            StatusCode::BAD_REQUEST => "bad_request",
            _ => "internal",
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownQuery(_) => StatusCode::NOT_FOUND,
            Error::AlreadyAnswered(_) | Error::Locked(_) | Error::NotSuspended => StatusCode::CONFLICT,
            Error::Io { .. } | Error::Checksum { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.kind(), "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Status {
    pub session_id: String,
    pub experiment: PathBuf,
    pub created_at: u64,
    pub round: usize,
    pub phase: Phase,
    pub budget_spent: usize,
    pub max_budget: usize,
    pub pending: usize,
    pub answered: usize,
    pub served: usize,
    /// A round is being computed.
    pub running: bool,
    pub metric_history: Vec<RoundMetrics>,
    pub final_metrics: Option<RoundMetrics>,
    pub last_error: Option<String>,
}

/// What readers see without touching the engine.
#[derive(Debug, Clone)]
struct Snapshot {
    status: Status,
    pending: Vec<LabelQuery>,
}

struct Session {
    id: String,
    path: PathBuf,
    created_at: u64,
    engine: Arc<Mutex<Engine>>,
    snapshot: RwLock<Arc<Snapshot>>,
    images: HashMap<String, (Image, SuperpixelPartition)>,
    served: Mutex<BTreeSet<u64>>,
    running: AtomicBool,
    last_error: Mutex<Option<String>>,
}

impl Session {
    fn refresh(&self, engine: &Engine) {
        let s = engine.state();
        let status = Status {
            session_id: self.id.clone(),
            experiment: self.path.clone(),
            created_at: self.created_at,
            round: s.round,
            phase: s.phase,
            budget_spent: s.budget_spent(),
            max_budget: s.config.max_budget,
            pending: s.pending_count(),
            answered: s.answers.len(),
            served: 0,
            running: self.running.load(Ordering::SeqCst),
            metric_history: s.metric_history.clone(),
            final_metrics: s.final_metrics.clone(),
            last_error: self.last_error.lock().unwrap().clone(),
        };
        let snap = Snapshot {
            status,
            pending: s.pending().cloned().collect(),
        };
        *self.snapshot.write().unwrap() = Arc::new(snap);
    }

    /// Latest snapshot with the live `running` flag and served count.
    fn snapshot(&self) -> Arc<Snapshot> {
        let snap = self.snapshot.read().unwrap().clone();
        let running = self.running.load(Ordering::SeqCst);
        let served = {
            let set = self.served.lock().unwrap();
            snap.pending.iter().filter(|q| set.contains(&q.query_id)).count()
        };
        if snap.status.running == running && snap.status.served == served {
            return snap;
        }
        let mut s = (*snap).clone();
        s.status.running = running;
        s.status.served = served;
        Arc::new(s)
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<String, Arc<Session>>>>,
}

impl AppState {
    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::no_session(id))
    }

    /// Waits until no round is running in any session; for tests and shutdown.
    pub async fn idle(&self) {
        loop {
            let busy = self
                .sessions
                .lock()
                .unwrap()
                .values()
                .any(|s| s.running.load(Ordering::SeqCst));
            if !busy {
                return;
            }
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/queries", get(fetch_queries))
        .route("/sessions/{id}/labels", post(submit_labels))
        .route("/sessions/{id}/status", get(get_status))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub experiment: PathBuf,
    /// Move a fresh or resumable experiment forward to its next wait.
    #[serde(default)]
    pub advance: bool,
}

fn new_session_id() -> String {
    format!("{:016x}", rand::random::<u64>())
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<Response> {
    let path = req.experiment.clone();
    if app.sessions.lock().unwrap().values().any(|s| s.path == path) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("{} already has an active session", path.display()),
        ));
    }
    let advance = req.advance;
    let engine = blocking(move || {
        let mut engine = Engine::open(&path)?;
        if advance {
            engine.advance()?;
        }
        Ok(engine)
    })
    .await?;
    let images = engine
        .train_set()
        .items
        .iter()
        .zip(engine.partitions())
        .map(|(it, p)| (it.id.clone(), (it.image.clone(), p.clone())))
        .collect();
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let session = Arc::new(Session {
        id: new_session_id(),
        path: req.experiment,
        created_at,
        engine: Arc::new(Mutex::new(engine)),
        snapshot: RwLock::new(Arc::new(Snapshot {
            status: Status {
                session_id: String::new(),
                experiment: PathBuf::new(),
                created_at,
                round: 0,
                phase: Phase::Fresh,
                budget_spent: 0,
                max_budget: 0,
                pending: 0,
                answered: 0,
                served: 0,
                running: false,
                metric_history: Vec::new(),
                final_metrics: None,
                last_error: None,
            },
            pending: Vec::new(),
        })),
        images,
        served: Mutex::new(BTreeSet::new()),
        running: AtomicBool::new(false),
        last_error: Mutex::new(None),
    });
    session.refresh(&session.engine.lock().unwrap());
    {
        let mut all = app.sessions.lock().unwrap();
        if all.values().any(|s| s.path == session.path) {
            return Err(ApiError::new(StatusCode::CONFLICT, "experiment already has an active session"));
        }
        all.insert(session.id.clone(), session.clone());
    }
    info!("session {} on {}", session.id, session.path.display());
    let status = session.snapshot().status.clone();
    Ok((StatusCode::CREATED, Json(status)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct Limit {
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct QueryCard {
    pub query_id: u64,
    pub image_id: String,
    pub round: usize,
    pub row: usize,
    pub col: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub superpixel_id: Option<u32>,
    pub crop: render::Crop,
    pub scale: u32,
    /// Outline edges in full-image pixel-corner coordinates.
    pub outline: Vec<render::Segment>,
    pub png_base64: String,
}

fn ndjson<T: Serialize>(items: &[T]) -> Response {
    let mut body = String::new();
    for it in items {
        body += &serde_json::to_string(it).expect("serializable");
        body.push('\n');
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn fetch_queries(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<Limit>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let snap = session.snapshot();
    let limit = q.limit.unwrap_or(usize::MAX);
    let chosen: Vec<LabelQuery> = snap.pending.iter().take(limit).cloned().collect();
    let sess = session.clone();
    let cards = blocking(move || {
        chosen
            .iter()
            .map(|q| {
                let (img, part) = sess
                    .images
                    .get(&q.image_id)
                    .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "query image missing"))?;
                let crop = render::crop_around(img.height(), img.width(), q.row, q.col);
                let png = render::render_png(img, part, q.row, q.col, &crop);
                Ok(QueryCard {
                    query_id: q.query_id,
                    image_id: q.image_id.clone(),
                    round: q.round,
                    row: q.row,
                    col: q.col,
                    image_height: img.height(),
                    image_width: img.width(),
                    superpixel_id: q.superpixel_id,
                    outline: render::outline(part, q.row, q.col),
                    crop,
                    scale: render::SCALE,
                    png_base64: render::base64(&png),
                })
            })
            .collect::<ApiResult<Vec<_>>>()
    })
    .await?;
    session.served.lock().unwrap().extend(cards.iter().map(|c| c.query_id));
    Ok(ndjson(&cards))
}

#[derive(Debug, Deserialize)]
pub struct Submission {
    pub query_id: u64,
    pub class: Class,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Ack {
    pub query_id: u64,
    pub remaining: usize,
    /// Set when this answer completed the batch and the next round started.
    pub resumed: bool,
}

fn spawn_resume(session: Arc<Session>) {
    if session.running.swap(true, Ordering::SeqCst) {
        return;
    }
    tokio::task::spawn_blocking(move || {
        let mut engine = session.engine.lock().unwrap();
        session.refresh(&engine);
        match engine.advance() {
            Ok(outcome) => info!("session {}: {outcome:?}", session.id),
            Err(e) => {
                error!("session {}: round failed: {e}", session.id);
                *session.last_error.lock().unwrap() = Some(e.to_string());
            }
        }
        session.served.lock().unwrap().clear();
        session.running.store(false, Ordering::SeqCst);
        session.refresh(&engine);
    });
}

async fn submit_labels(State(app): State<AppState>, Path(id): Path<String>, body: String) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let subs = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<Submission>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad submission: {e}")))?;
    if subs.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "no submissions in body"));
    }
    let single = subs.len() == 1;
    let sess = session.clone();
    let results = blocking(move || {
        let mut engine = sess.engine.lock().unwrap();
        let out: Vec<Result<Ack, ApiError>> = subs
            .iter()
            .map(|s| {
                let remaining = engine.submit(s.query_id, s.class, AnswerSource::Human)?;
                Ok(Ack {
                    query_id: s.query_id,
                    remaining,
                    resumed: false,
                })
            })
            .collect();
        sess.refresh(&engine);
        Ok(out)
    })
    .await?;
    let completed = results.iter().any(|r| matches!(r, Ok(a) if a.remaining == 0));
    let resumed = completed && {
        let phase = session.snapshot().status.phase;
        phase == Phase::AwaitingAnswers
    };
    if resumed {
        spawn_resume(session.clone());
    }
    let mark = |mut a: Ack| {
        a.resumed = resumed && a.remaining == 0;
        a
    };
    if single {
        return results
            .into_iter()
            .next()
            .expect("one result")
            .map(|a| Json(mark(a)).into_response());
    }
    let lines: Vec<serde_json::Value> = results
        .into_iter()
        .map(|r| match r {
            Ok(a) => serde_json::to_value(mark(a)).expect("serializable"),
            Err(e) => serde_json::json!({ "error": e.kind(), "message": e.message }),
        })
        .collect();
    Ok(ndjson(&lines))
}

async fn get_status(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Status>> {
    let session = app.session(&id)?;
    Ok(Json(session.snapshot().status.clone()))
}

/// Listen address from [`BIND_ENV`], falling back to [`DEFAULT_BIND`].
pub fn bind_addr() -> Result<SocketAddr, String> {
    let raw = std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.to_string());
    raw.parse().map_err(|e| format!("{BIND_ENV}={raw}: {e}"))
}

/// Serves until the process is stopped. With `experiment`, a session is
/// opened up front and its id logged.
pub async fn serve(addr: SocketAddr, experiment: Option<PathBuf>) -> std::io::Result<()> {
    let app = AppState::default();
    if let Some(path) = experiment {
        let resp = create_session(
            State(app.clone()),
            Json(CreateSession {
                experiment: path,
                advance: true,
            }),
        )
        .await;
        match resp {
            Ok(_) => {
                let ids: Vec<String> = app.sessions.lock().unwrap().keys().cloned().collect();
                info!("session ready: {}", ids.join(","));
                println!("session {}", ids.join(","));
            }
            Err(e) => return Err(std::io::Error::other(e.message)),
        }
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
