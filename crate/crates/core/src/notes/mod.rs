//! Unstructured arm: chunking, on-demand indexing and retrieval over a
//! patient's clinical notes.

mod chunker;
mod corpus;
mod index;
mod retrieve;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunker::{chunk_note, chunk_notes};
pub use corpus::{corpus_fingerprint, NoteCorpus};
pub use index::{build_index, NoteIndex, NoteIndexStore};
pub use retrieve::{retrieve_chunks, serialize_structured_for_query, QUERY_SEPARATOR};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid chunking config: {0}")]
pub struct ChunkingConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_size_tokens: usize,
    pub overlap_tokens: usize,
    pub sentence_aware: bool,
    /// Header names recognized at the start of a line (followed by `:`),
    /// compared case-insensitively.
    #[serde(default = "default_section_headers")]
    pub section_headers: Vec<String>,
}

pub fn default_section_headers() -> Vec<String> {
    [
        "Chief Complaint",
        "History of Present Illness",
        "Past Medical History",
        "Allergies",
        "Medications on Admission",
        "Physical Exam",
        "Pertinent Results",
        "Brief Hospital Course",
        "Assessment and Plan",
        "Discharge Medications",
        "Discharge Diagnosis",
        "Discharge Instructions",
        "Impression",
        "Findings",
        "Plan",
    ]
    .into_iter()
    .map(str::to_owned)
    .collect()
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { chunk_size_tokens: 256, overlap_tokens: 32, sentence_aware: true, section_headers: default_section_headers() }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), ChunkingConfigError> {
        if self.chunk_size_tokens == 0 {
            return Err(ChunkingConfigError("chunk_size_tokens must be at least 1".into()));
        }
        if self.overlap_tokens >= self.chunk_size_tokens {
            return Err(ChunkingConfigError(format!(
                "overlap_tokens ({}) must be smaller than chunk_size_tokens ({})",
                self.overlap_tokens, self.chunk_size_tokens
            )));
        }
        Ok(())
    }
}
