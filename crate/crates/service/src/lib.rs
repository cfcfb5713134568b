//! HTTP front end for the pipeline: jobs, logs, run artifacts, registries
//! and the interactive detection endpoint.
//!
//! No authentication; bind to a trusted network only.

mod api;
pub mod jobs;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub use api::router;
pub use jobs::{JobRecord, JobStatus, JobStore, DEFAULT_WORKERS};

pub const DEMO_BUDGET: Duration = Duration::from_secs(30);
/// Upper bound on a single log long-poll.
pub const MAX_LOG_WAIT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub home: PathBuf,
    pub workers: usize,
    pub demo_budget: Duration,
}

impl ServiceConfig {
    pub fn new(home: impl Into<PathBuf>) -> Self {
        ServiceConfig { home: home.into(), workers: DEFAULT_WORKERS, demo_budget: DEMO_BUDGET }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<JobStore>,
    pub demo_budget: Duration,
}

impl AppState {
    pub fn open(cfg: &ServiceConfig) -> std::io::Result<Self> {
        Ok(AppState { store: JobStore::open(&cfg.home, cfg.workers)?, demo_budget: cfg.demo_budget })
    }
}

/// Binds `addr` and serves until the process ends. The bound address is
/// passed to `on_bound` (useful with port 0).
pub async fn serve(addr: SocketAddr, cfg: ServiceConfig, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let state = AppState::open(&cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    log::info!("serving on http://{bound} with home {}", cfg.home.display());
    on_bound(bound);
    axum::serve(listener, router(state)).await
}
