//! HTTP service for live chat sessions against registered models, with
//! Likert ratings, pairwise judgments and aggregated summaries.
//!
//! Every state change is one line in an append-only JSONL log, which is
//! replayed on startup.

pub mod aggregate;
pub mod api;
pub mod goals;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use chatfuse_core::evalkit::DEFAULT_BOOTSTRAP_RESAMPLES;
use chatfuse_core::intent::IntentDetector;
use chatfuse_core::knowledge::KnowledgeRouter;
use chatfuse_core::pivot::PivotModel;
use indexmap::IndexMap;
use serde::Serialize;

pub use aggregate::{aggregate_records, HumanEvalTables, ModelRatings, PairwiseRow};
pub use api::{goal_coverage, router, serve, AppState, MessageReply, SessionView};
pub use goals::GoalSampler;
pub use store::{PairwiseJudgment, Preference, Rating, Record, SessionStatus, StoredTurn};

pub const SCHEMA_VERSION: u32 = 1;
pub const RATER_HEADER: &str = "x-rater-id";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation(_) => "validation",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if let ServiceError::Internal(m) = &self {
            log::error!("{m}");
        }
        (self.status(), Json(ErrorBody { code: self.code(), message: self.to_string() })).into_response()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Record log; `None` keeps everything in memory.
    pub store_path: Option<PathBuf>,
    /// Open sessions idle for longer become ABANDONED.
    pub idle_timeout: Option<Duration>,
    /// Seeds goal sampling and bootstrap resampling.
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            store_path: None,
            idle_timeout: None,
            seed: 0,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
        }
    }
}

/// Models, knowledge and goals served by one instance.
pub struct Registry {
    pub models: IndexMap<String, Arc<dyn PivotModel>>,
    pub router: Arc<dyn KnowledgeRouter>,
    pub detector: Arc<IntentDetector>,
    pub goals: GoalSampler,
}
