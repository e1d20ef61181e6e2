//! The ask operation shared by `POST /ask` and `ehrnav ask`.

use ehrnav_core::model::{Question, TraceRecord};
use ehrnav_core::{AnswerRecord, AskOutcome, DatasetProfile, Modality, Timestamp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{Registered, Registry};
use crate::store::TraceStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_scope: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admission_scope: Option<String>,
    /// Picks the database registered under this profile; the first
    /// database when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    /// Defaults to the profile's usual modality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
}

impl AskRequest {
    pub fn new(question: impl Into<String>) -> Self {
        Self { question: question.into(), patient_scope: None, admission_scope: None, profile: None, modality: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRef {
    pub key: String,
    pub note_id: String,
    pub index: usize,
    pub timestamp: Timestamp,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredSummary {
    pub sql: String,
    pub columns: Vec<String>,
    pub row_count: usize,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotesSummary {
    pub fallback_mode: bool,
    pub k_used: usize,
    pub chunks: Vec<ChunkRef>,
}

/// Provenance of an answer: the SQL that ran and how many rows it gave,
/// and which note chunks were read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSummary {
    pub insufficient_evidence: bool,
    pub sql_attempts: u32,
    pub structured: Option<StructuredSummary>,
    /// Why the structured arm gave up, when it ran and did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_failure: Option<String>,
    pub notes: Option<NotesSummary>,
}

impl EvidenceSummary {
    pub fn from_outcome(o: &AskOutcome) -> Self {
        let run = o.structured_run.as_ref();
        Self {
            insufficient_evidence: o.insufficient_evidence(),
            sql_attempts: run.map(|r| r.attempts.len() as u32).unwrap_or(0),
            structured: o.evidence.structured.as_ref().map(|s| StructuredSummary {
                sql: s.sql.clone(),
                columns: s.columns.clone(),
                row_count: s.rows.len(),
                attempt_count: s.attempt_count,
            }),
            structured_failure: run.and_then(|r| r.outcome.as_ref().err()).map(|f| f.reason.clone()),
            notes: o.evidence.unstructured.as_ref().map(|u| NotesSummary {
                fallback_mode: u.fallback_mode,
                k_used: u.k_used,
                chunks: u
                    .chunks
                    .iter()
                    .map(|c| ChunkRef {
                        key: c.chunk.key(),
                        note_id: c.chunk.note_id.clone(),
                        index: c.chunk.index,
                        timestamp: c.chunk.timestamp,
                        score: c.score,
                    })
                    .collect(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub trace_id: String,
    pub db: String,
    pub profile: DatasetProfile,
    pub modality: Modality,
    pub answer: AnswerRecord,
    pub evidence: EvidenceSummary,
}

#[derive(Debug, Error)]
pub enum AskError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    UnknownProfile(String),
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("{message}")]
    Backend { class: String, message: String, trace: Box<TraceRecord> },
    #[error("{0}")]
    Internal(String),
}

impl AskError {
    pub fn class(&self) -> &str {
        match self {
            Self::Invalid(_) => "invalid_request",
            Self::UnknownProfile(_) => "unknown_profile",
            Self::UnknownPatient(_) => "unknown_patient",
            Self::Backend { class, .. } => class,
            Self::Internal(_) => "internal",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            Self::Invalid(_) => 400,
            Self::UnknownProfile(_) | Self::UnknownPatient(_) => 422,
            Self::Backend { .. } => 502,
            Self::Internal(_) => 500,
        }
    }

    /// Process exit code of `ehrnav ask` for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 2,
            Self::UnknownProfile(_) | Self::UnknownPatient(_) => 3,
            Self::Backend { .. } => 4,
            Self::Internal(_) => 1,
        }
    }

    pub fn partial_trace(&self) -> Option<&TraceRecord> {
        match self {
            Self::Backend { trace, .. } => Some(trace),
            _ => None,
        }
    }
}

/// Error payload of the HTTP API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub class: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(class: impl Into<String>, message: impl Into<String>) -> Self {
        Self { error: ErrorDetail { class: class.into(), message: message.into() }, trace: None }
    }
}

impl From<&AskError> for ErrorBody {
    fn from(e: &AskError) -> Self {
        Self { trace: e.partial_trace().cloned(), ..Self::new(e.class(), e.to_string()) }
    }
}

fn non_blank(s: Option<&String>) -> Option<String> {
    s.map(|s| s.trim().to_owned()).filter(|s| !s.is_empty())
}

/// Picks the database for `req` and checks the question and patient.
pub fn resolve<'r>(registry: &'r Registry, req: &AskRequest) -> Result<&'r Registered, AskError> {
    if req.question.trim().is_empty() {
        return Err(AskError::Invalid("question is empty".into()));
    }
    let profile = match non_blank(req.profile.as_ref()) {
        Some(p) => Some(p.parse::<DatasetProfile>().map_err(|e| AskError::UnknownProfile(e.to_string()))?),
        None => None,
    };
    let entry = registry.for_profile(profile).ok_or_else(|| match profile {
        Some(p) => AskError::UnknownProfile(format!("no database is registered for profile `{p}`")),
        None => AskError::UnknownProfile("no database is registered".into()),
    })?;
    if let Some(patient) = non_blank(req.patient_scope.as_ref()) {
        if !entry.navigator.knows_patient(&patient) {
            return Err(AskError::UnknownPatient(patient));
        }
    }
    Ok(entry)
}

/// Runs one question end to end and records its trace under `trace_id`,
/// on success and on failure alike.
pub fn ask(registry: &Registry, traces: &TraceStore, req: &AskRequest, trace_id: &str) -> Result<AskResponse, AskError> {
    let entry = resolve(registry, req)?;
    let mut question = Question::new(trace_id, req.question.trim()).map_err(|e| AskError::Invalid(e.to_string()))?;
    question.patient_scope = non_blank(req.patient_scope.as_ref());
    question.admission_scope = non_blank(req.admission_scope.as_ref());
    let modality = req.modality.unwrap_or_else(|| entry.profile.default_modality());
    let store = |t: TraceRecord| traces.append(t).map_err(|e| AskError::Internal(format!("trace store: {e}")));
    match entry.navigator.ask(&question, modality) {
        Ok(outcome) => {
            store(outcome.trace.clone())?;
            Ok(AskResponse {
                trace_id: outcome.trace.trace_id.clone(),
                db: entry.id.clone(),
                profile: entry.profile,
                modality,
                evidence: EvidenceSummary::from_outcome(&outcome),
                answer: outcome.answer,
            })
        }
        Err(e) => {
            store((*e.trace).clone())?;
            if !e.failure.is_backend() {
                return Err(AskError::Invalid(e.failure.to_string()));
            }
            Err(AskError::Backend { class: e.failure.class().to_owned(), message: e.failure.to_string(), trace: e.trace })
        }
    }
}
