//! Pairwise annotation service: task assignment, rating ingestion, QA
//! re-annotation and progress reporting over HTTP.

pub mod http;
pub mod state;

use std::net::SocketAddr;

pub use http::{router, AppState, MediaLinks, RatingBody, TaskView};
pub use state::{tasks_from_pairs, read_tasks, write_tasks, Ack, Assignment, Ledger, Progress, ServiceError, TaskDef, TaskState};

/// Guideline text served when no file is configured.
pub const DEFAULT_GUIDELINES: &str = include_str!("../guidelines.txt");

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
