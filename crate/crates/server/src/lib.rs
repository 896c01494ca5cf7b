//! Ingestion service: accepts signed field reports over HTTP, keeps them in
//! an append-only store, and serves the current contingency risk picture.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gridsight_core::api::{ErrorBody, Health};
use gridsight_core::contingency::{
    analyze, derive_probabilities, risk_surface, ContingencyError, RiskAssessment, ScreeningPolicy,
};
use gridsight_core::fixtures;
use gridsight_core::grid::{parse_grid, GridError, GridSpec};
use gridsight_core::powerflow::{Controls, SolveOptions};
use gridsight_core::report::{
    ingest, DeviceRegistry, IngestSettings, Rejection, ReportError, ReportStore, SignedEnvelope,
};
use serde::Deserialize;
use thiserror::Error;
use tokio::net::TcpListener;

pub const DEFAULT_RES: usize = 20;
pub const MAX_RES: usize = 512;

pub trait Clock: Send + Sync + 'static {
    fn now_ms(&self) -> i64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicI64>);

impl ManualClock {
    pub fn new(now_ms: i64) -> Self {
        ManualClock(Arc::new(AtomicI64::new(now_ms)))
    }

    pub fn set(&self, now_ms: i64) {
        self.0.store(now_ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

struct Shared {
    registry: DeviceRegistry,
    store: ReportStore,
    spec: GridSpec,
    ingest: IngestSettings,
    policy: ScreeningPolicy,
    solve: SolveOptions,
    clock: Arc<dyn Clock>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(registry: DeviceRegistry, store: ReportStore, spec: GridSpec) -> Self {
        Self::with_clock(registry, store, spec, Arc::new(SystemClock))
    }

    pub fn with_clock(
        registry: DeviceRegistry,
        store: ReportStore,
        spec: GridSpec,
        clock: Arc<dyn Clock>,
    ) -> Self {
        AppState(Arc::new(Shared {
            registry,
            store,
            spec,
            ingest: IngestSettings::default(),
            policy: ScreeningPolicy::default(),
            solve: SolveOptions::default(),
            clock,
        }))
    }

    pub fn store(&self) -> &ReportStore {
        &self.0.store
    }

    pub fn spec(&self) -> &GridSpec {
        &self.0.spec
    }

    /// Screened assessment over a snapshot of the accepted reports.
    pub fn assessment(&self) -> Result<RiskAssessment, ContingencyError> {
        let s = &self.0;
        let evidence: Vec<_> = s.store.snapshot().iter().map(|r| r.evidence()).collect();
        let probs = derive_probabilities(&evidence, &s.spec, s.policy.floor);
        analyze(
            &s.spec,
            &probs,
            &s.policy,
            &Controls::from_spec(&s.spec),
            &s.solve,
            false,
        )
    }
}

fn error(status: StatusCode, code: &str, reason: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            code: code.to_owned(),
            reason: reason.into(),
        }),
    )
        .into_response()
}

fn rejection(r: &Rejection) -> Response {
    let status = StatusCode::from_u16(r.http_status()).unwrap_or(StatusCode::BAD_REQUEST);
    (status, Json(ErrorBody::from(r))).into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

async fn post_report(State(state): State<AppState>, body: Bytes) -> Response {
    let envelope: SignedEnvelope = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => {
            let r = Rejection::Malformed(e.to_string());
            let now = state.0.clock.now_ms();
            if let Err(log_err) = state.0.store.record_rejection("", &r, now) {
                tracing::error!(error = %log_err, "could not write rejection log");
            }
            return rejection(&r);
        }
    };
    // signature checks and the fsync on accept are blocking work
    let outcome = tokio::task::spawn_blocking(move || {
        let s = &state.0;
        ingest(
            &envelope,
            &s.registry,
            &s.store,
            &s.spec,
            &s.ingest,
            s.clock.now_ms(),
        )
    })
    .await;
    match outcome {
        Ok(Ok(record)) => Json(record).into_response(),
        Ok(Err(r)) => rejection(&r),
        Err(e) => internal(e),
    }
}

#[derive(Deserialize)]
struct RiskQuery {
    res: Option<usize>,
}

async fn get_risk(State(state): State<AppState>, Query(q): Query<RiskQuery>) -> Response {
    let res = q.res.unwrap_or(DEFAULT_RES);
    if !(2..=MAX_RES).contains(&res) {
        return error(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            format!("res must be in 2..={MAX_RES}"),
        );
    }
    let outcome = tokio::task::spawn_blocking(move || {
        let assessment = state.assessment()?;
        risk_surface(&assessment, state.spec(), res)
    })
    .await;
    match outcome {
        Ok(Ok(raster)) => ([(header::CONTENT_TYPE, "text/csv")], raster.to_csv()).into_response(),
        Ok(Err(e)) => internal(e),
        Err(e) => internal(e),
    }
}

async fn get_contingencies(State(state): State<AppState>) -> Response {
    match tokio::task::spawn_blocking(move || state.assessment()).await {
        Ok(Ok(a)) => ([(header::CONTENT_TYPE, "text/csv")], a.to_csv()).into_response(),
        Ok(Err(e)) => internal(e),
        Err(e) => internal(e),
    }
}

async fn get_health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        name: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        reports: state.0.store.len(),
        devices: state.0.registry.len(),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/reports", post(post_report))
        .route("/risk", get(get_risk))
        .route("/contingencies", get(get_contingencies))
        .route("/health", get(get_health))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub listen: SocketAddr,
    pub registry: PathBuf,
    pub store_path: PathBuf,
    /// Grid to assess; the bundled seven-bus network when absent.
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("registry: {0}")]
    Registry(#[from] ReportError),
    #[error("report store {path}: {source}")]
    Store {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("grid {path}: {source}")]
    Grid { path: PathBuf, source: GridError },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loads the registry, store and grid named by `config`.
pub fn load_state(config: &ServeConfig) -> Result<AppState, ServeError> {
    let registry = DeviceRegistry::load(&config.registry)?;
    let store = ReportStore::open(&config.store_path).map_err(|source| ServeError::Store {
        path: config.store_path.clone(),
        source,
    })?;
    let spec = match &config.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ServeError::Read {
                path: path.clone(),
                source,
            })?;
            parse_grid(&text).map_err(|source| ServeError::Grid {
                path: path.clone(),
                source,
            })?
        }
        None => fixtures::seven_bus(),
    };
    Ok(AppState::new(registry, store, spec))
}

pub struct Server {
    listener: TcpListener,
    state: AppState,
}

impl Server {
    pub async fn bind(addr: SocketAddr, state: AppState) -> Result<Server, ServeError> {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| ServeError::Bind { addr, source })?;
        Ok(Server { listener, state })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until `shutdown` resolves, drains in-flight requests, then
    /// flushes the store.
    pub async fn run(
        self,
        shutdown: impl Future<Output = ()> + Send + 'static,
    ) -> Result<(), ServeError> {
        let state = self.state.clone();
        axum::serve(self.listener, router(self.state))
            .with_graceful_shutdown(shutdown)
            .await?;
        state.store().sync()?;
        tracing::info!(reports = state.store().len(), "store flushed");
        Ok(())
    }
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
