//! Passages, conversation sessions and relevance judgments.

mod io;
mod qrels;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use io::{load_collection, load_sessions, read_collection, read_sessions, write_collection, write_sessions, LoadOptions};
pub use qrels::{derive_qrels, read_qrels, write_qrels, Qrels};
pub use synthetic::{generate_synthetic, ShiftSchedule, SyntheticDataset, SyntheticManifest, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

/// Passages keyed by id. Iteration order is ascending id.
pub type Collection = BTreeMap<String, Passage>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    /// 1-based position within the session.
    pub turn_index: usize,
    pub query_text: String,
    pub gold_passage_id: Option<String>,
    /// Carried through ingestion; the default pipeline does not read it.
    pub answer_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

impl Session {
    /// Turn with 1-based index `n`.
    pub fn turn(&self, n: usize) -> Option<&Turn> {
        n.checked_sub(1).and_then(|i| self.turns.get(i))
    }

    /// Turns strictly before turn `n`.
    pub fn history(&self, n: usize) -> &[Turn] {
        &self.turns[..n.saturating_sub(1).min(self.turns.len())]
    }
}

/// Join key used across run files, qrels and PRJ tables.
pub fn query_id(session_id: &str, turn_index: usize) -> String {
    format!("{session_id}_{turn_index}")
}
