//! Multi-agent question answering over a patient's electronic health record.
//!
//! A question flows through three stages:
//!
//! 1. [`structured`]: schema discovery, cached table descriptions, semantic
//!    table selection, row sampling, SQL generation and sandboxed execution
//!    with a bounded repair loop.
//! 2. [`notes`]: on-demand chunking and indexing of the patient's clinical
//!    notes, then retrieval conditioned on the question fused with whatever
//!    structured evidence was found.
//! 3. [`synthesis`]: the joint evidence is rendered into the answer prompt
//!    and the model reply is parsed into SQL / notes evidence / response.
//!
//! [`navigator::Navigator`] wires the stages together and records a
//! [`model::TraceRecord`] for every question. [`eval`] runs benchmark files
//! through the same pipeline.

#![forbid(unsafe_code)]

pub mod embedding;
pub mod eval;
pub mod fixtures;
pub mod llm;
pub mod model;
pub mod navigator;
pub mod notes;
pub mod structured;
pub mod synthesis;
pub mod text;
pub mod trace;

pub use model::{
    AnswerRecord, DatasetProfile, Modality, NoteChunk, NoteDocument, Question, StructuredEvidence,
    TableDescription, TableRef, Timestamp, TraceRecord, UnstructuredEvidence,
};
pub use navigator::{AskOutcome, Navigator, PipelineConfig};
