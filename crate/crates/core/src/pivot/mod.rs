//! State prediction, knowledge grounding and response generation over fused
//! dialogs.

pub mod chat;
pub mod examples;
pub mod history;
pub mod serialize;
pub mod state;
pub mod train;

pub use chat::*;
pub use examples::*;
pub use history::*;
pub use serialize::*;
pub use state::*;
pub use train::*;

use thiserror::Error;

use crate::backends::BackendError;

#[derive(Debug, Error)]
pub enum PivotError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid dialog: {0}")]
    Validation(String),
    #[error("knowledge lookup failed: {0}")]
    Knowledge(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("intent detection failed: {0}")]
    Intent(String),
    #[error("{0}")]
    Io(String),
}
