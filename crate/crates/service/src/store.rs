//! Append-only JSONL record log.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chatfuse_core::corpus::{GoalCard, Speaker};
use chatfuse_core::knowledge::KnowledgeKind;
use chatfuse_core::pivot::State;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStatus {
    Open,
    Rated,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub session_id: String,
    pub success: bool,
    pub appropriateness: u8,
    pub engagingness: u8,
    pub rater_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Preference {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseJudgment {
    pub dialog_a_id: String,
    pub dialog_b_id: String,
    pub overall: Preference,
    pub a_appropriateness: u8,
    pub a_engagingness: u8,
    pub b_appropriateness: u8,
    pub b_engagingness: u8,
    pub rater_id: String,
}

/// One persisted system or user utterance. System turns carry the state
/// they were generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTurn {
    pub speaker: Speaker,
    pub text: String,
    /// Model output before lexicalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_kind: Option<KnowledgeKind>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    SessionCreated {
        session_id: String,
        model_name: String,
        goal_card: GoalCard,
        created_at: u64,
    },
    /// A user utterance and the reply to it, written together.
    Exchange {
        session_id: String,
        at: u64,
        user: StoredTurn,
        system: StoredTurn,
    },
    StatusChanged {
        session_id: String,
        at: u64,
        status: SessionStatus,
    },
    Rating(Rating),
    Pairwise(PairwiseJudgment),
}

/// Appends records to a file, or to memory when there is no path. Each
/// record is written and flushed as one line.
pub struct Store {
    path: Option<PathBuf>,
    file: Mutex<Option<File>>,
    memory: Mutex<Vec<Record>>,
}

impl Store {
    pub fn open(path: Option<&Path>) -> Result<(Self, Vec<Record>), ServiceError> {
        let Some(path) = path else {
            return Ok((Store { path: None, file: Mutex::new(None), memory: Mutex::new(Vec::new()) }, Vec::new()));
        };
        let records = if path.exists() { read_records(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
        Ok((
            Store { path: Some(path.to_path_buf()), file: Mutex::new(Some(file)), memory: Mutex::new(Vec::new()) },
            records,
        ))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, record: &Record) -> Result<(), ServiceError> {
        let mut guard = self.file.lock().expect("store lock");
        if let Some(f) = guard.as_mut() {
            let mut line = serde_json::to_vec(record).expect("record serializes");
            line.push(b'\n');
            f.write_all(&line).and_then(|_| f.flush()).map_err(|e| ServiceError::Internal(e.to_string()))?;
        } else {
            self.memory.lock().expect("store lock").push(record.clone());
        }
        Ok(())
    }

    /// Everything persisted so far, read back from the raw log.
    pub fn records(&self) -> Result<Vec<Record>, ServiceError> {
        match &self.path {
            Some(p) => {
                let _guard = self.file.lock().expect("store lock");
                read_records(p)
            }
            None => Ok(self.memory.lock().expect("store lock").clone()),
        }
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, ServiceError> {
    let raw = fs::read_to_string(path).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ServiceError::Internal(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
