//! End-to-end orchestration: structured arm, notes arm, synthesis.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder};
use crate::llm::{Gateway, LlmError};
use crate::model::{
    AgentRole, AnswerRecord, DatasetProfile, Modality, ModelError, Question, StructuredEvidence, TraceRecord,
    UnstructuredEvidence,
};
use crate::notes::{retrieve_chunks, ChunkingConfig, NoteCorpus, NoteIndexStore};
use crate::structured::{
    describe_table, discover_schema, DescribeError, execute_sql, run_structured_pipeline, scope_value, Database, DescriptionCache,
    SqlParams, StructuredConfig, StructuredContext, StructuredError, StructuredRun, PATIENT_PARAM,
};
use crate::synthesis::{answer_notes_only, synthesize, EvidenceBundle, SynthesisError, INSUFFICIENT_EVIDENCE};
use crate::trace::{Clock, SystemClock, TraceRecorder, VirtualClock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: DatasetProfile,
    #[serde(default)]
    pub structured: StructuredConfig,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    /// Note chunks handed to the synthesizer.
    pub note_k: usize,
    /// Result rows fused into the retrieval query.
    pub query_max_rows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profile: DatasetProfile::Fixture,
            structured: StructuredConfig::default(),
            chunking: ChunkingConfig::default(),
            note_k: 10,
            query_max_rows: 20,
        }
    }
}

/// How trace latencies are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Wall-clock time.
    System,
    /// Only scripted backend latencies count, so runs are reproducible.
    Virtual,
}

#[derive(Debug, Error)]
pub enum PipelineFailure {
    #[error(transparent)]
    Question(#[from] ModelError),
    #[error(transparent)]
    Structured(#[from] StructuredError),
    #[error("note retrieval: {0}")]
    Notes(#[from] EmbedError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

fn llm_class(e: &LlmError) -> &'static str {
    match e {
        LlmError::Transport(_) => "llm_transport",
        LlmError::ScriptExhausted { .. } => "llm_script_exhausted",
        LlmError::MissingPlaceholders { .. } => "prompt_template",
        LlmError::InvalidRequest(_) => "llm_request",
        LlmError::Config(_) => "llm_config",
    }
}

impl PipelineFailure {
    /// Short machine-readable failure class.
    pub fn class(&self) -> &'static str {
        match self {
            Self::Question(_) => "invalid_question",
            Self::Structured(StructuredError::Llm(e)) | Self::Structured(StructuredError::Describe(DescribeError::Llm(e))) => {
                llm_class(e)
            }
            Self::Structured(StructuredError::Describe(_)) => "table_description",
            Self::Structured(StructuredError::Db(_) | StructuredError::Unavailable(_)) => "db_unavailable",
            Self::Structured(StructuredError::Embed(_)) | Self::Notes(_) => "embedding",
            Self::Synthesis(SynthesisError::Llm(e)) => llm_class(e),
            Self::Synthesis(SynthesisError::Parse { .. }) => "answer_parse",
            Self::Synthesis(SynthesisError::EmptyContext) => "empty_context",
        }
    }

    /// Whether a backend (model, embedder or database) failed, as opposed
    /// to the request itself being unusable.
    pub fn is_backend(&self) -> bool {
        !matches!(self, Self::Question(_))
    }
}

/// A failed run together with the steps recorded before the failure.
#[derive(Debug, Error)]
#[error("{failure}")]
pub struct PipelineError {
    pub failure: PipelineFailure,
    pub trace: Box<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskOutcome {
    pub answer: AnswerRecord,
    pub evidence: EvidenceBundle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_run: Option<StructuredRun>,
    pub modality: Modality,
    pub trace: TraceRecord,
}

impl AskOutcome {
    pub fn insufficient_evidence(&self) -> bool {
        self.evidence.is_insufficient()
    }
}

/// The assembled pipeline: backends, one database, the note corpus and the
/// caches shared across questions.
pub struct Navigator {
    gateway: Arc<Gateway>,
    embedder: Arc<dyn Embedder>,
    db: Option<Arc<Database>>,
    notes: Arc<NoteCorpus>,
    descriptions: Arc<DescriptionCache>,
    indexes: Arc<NoteIndexStore>,
    config: PipelineConfig,
    clock: ClockMode,
    patient_lookup: Option<String>,
}

impl Navigator {
    pub fn new(gateway: Arc<Gateway>, embedder: Arc<dyn Embedder>, config: PipelineConfig) -> Self {
        Self {
            gateway,
            embedder,
            db: None,
            notes: Arc::new(NoteCorpus::default()),
            descriptions: Arc::new(DescriptionCache::in_memory()),
            indexes: Arc::new(NoteIndexStore::in_memory()),
            patient_lookup: crate::fixtures::patient_lookup_sql(config.profile).map(str::to_owned),
            config,
            clock: ClockMode::System,
        }
    }

    pub fn with_database(mut self, db: Arc<Database>) -> Self {
        self.db = Some(db);
        self
    }

    pub fn with_notes(mut self, notes: Arc<NoteCorpus>) -> Self {
        self.notes = notes;
        self
    }

    pub fn with_description_cache(mut self, cache: Arc<DescriptionCache>) -> Self {
        self.descriptions = cache;
        self
    }

    pub fn with_index_store(mut self, store: Arc<NoteIndexStore>) -> Self {
        self.indexes = store;
        self
    }

    pub fn with_clock(mut self, clock: ClockMode) -> Self {
        self.clock = clock;
        self
    }

    /// SQL returning a row when `:patient_id` exists in the database. `None`
    /// leaves the note corpus as the only source of known patients.
    pub fn with_patient_lookup(mut self, sql: Option<String>) -> Self {
        self.patient_lookup = sql;
        self
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn database(&self) -> Option<&Arc<Database>> {
        self.db.as_ref()
    }

    pub fn notes(&self) -> &NoteCorpus {
        &self.notes
    }

    pub fn descriptions(&self) -> &DescriptionCache {
        &self.descriptions
    }

    pub fn index_store(&self) -> &NoteIndexStore {
        &self.indexes
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn profile(&self) -> DatasetProfile {
        self.config.profile
    }

    pub fn new_trace(&self, question_id: &str) -> TraceRecorder {
        let clock: Arc<dyn Clock> = match self.clock {
            ClockMode::System => Arc::new(SystemClock::new()),
            ClockMode::Virtual => Arc::new(VirtualClock::new()),
        };
        TraceRecorder::new(question_id, clock)
    }

    /// Whether the note corpus or the database knows `patient`.
    pub fn knows_patient(&self, patient: &str) -> bool {
        if self.notes.has_patient(patient) {
            return true;
        }
        let (Some(db), Some(sql)) = (&self.db, &self.patient_lookup) else { return false };
        let params = SqlParams::from([(PATIENT_PARAM.to_owned(), scope_value(patient))]);
        execute_sql(db, sql, &params, self.config.structured.timeout()).is_ok_and(|r| !r.rows.is_empty())
    }

    /// Describes every table that is not cached yet. Returns the number of
    /// tables in the schema.
    pub fn warm_descriptions(&self, trace: &TraceRecorder) -> Result<usize, StructuredError> {
        let Some(db) = &self.db else { return Ok(0) };
        let catalog = discover_schema(db)?;
        for t in &catalog.tables {
            describe_table(t, db.id(), &self.gateway, &self.descriptions, trace)?;
        }
        Ok(catalog.tables.len())
    }

    /// Builds (or reuses) the note index of `patient`.
    pub fn warm_notes(&self, patient: &str) -> Result<(), EmbedError> {
        self.indexes
            .get_or_build(patient, self.notes.for_patient(patient), &self.config.chunking, self.embedder.as_ref())
            .map(|_| ())
    }

    fn fail(&self, trace: &TraceRecorder, id: &str, failure: impl Into<PipelineFailure>) -> PipelineError {
        PipelineError { failure: failure.into(), trace: Box::new(trace.snapshot(id)) }
    }

    fn retrieve(
        &self,
        q: &Question,
        structured: Option<&StructuredEvidence>,
        trace: &TraceRecorder,
    ) -> Result<UnstructuredEvidence, EmbedError> {
        let Some(patient) = q.patient_scope.as_deref() else {
            return Ok(UnstructuredEvidence { chunks: Vec::new(), k_used: self.config.note_k, fallback_mode: structured.is_none() });
        };
        let started = trace.now_ms();
        let notes = self.notes.for_patient(patient);
        let (index, built) =
            self.indexes.get_or_build(patient, notes, &self.config.chunking, self.embedder.as_ref())?;
        trace.record_tool(
            AgentRole::NoteIndexer,
            if built { "build_index" } else { "reuse_index" },
            patient,
            &index.corpus_fingerprint,
            started,
        );
        let started = trace.now_ms();
        let evidence =
            retrieve_chunks(q, structured, &index, self.embedder.as_ref(), self.config.note_k, self.config.query_max_rows)?;
        let keys: Vec<String> = evidence.chunks.iter().map(|c| c.chunk.key()).collect();
        trace.record_tool(AgentRole::NoteRetriever, "retrieve_chunks", &q.text, &keys.join(","), started);
        Ok(evidence)
    }

    /// Answers `q` using the arms `modality` selects. The trace id is the
    /// question id; callers that need unique ids overwrite it.
    pub fn ask(&self, q: &Question, modality: Modality) -> Result<AskOutcome, PipelineError> {
        let trace = self.new_trace(&q.id);
        if let Err(e) = q.validate() {
            return Err(self.fail(&trace, &q.id, e));
        }

        let mut structured_run = None;
        if modality.uses_tables() {
            if let Some(db) = &self.db {
                let ctx = StructuredContext {
                    db,
                    gateway: &self.gateway,
                    embedder: self.embedder.as_ref(),
                    cache: &self.descriptions,
                    profile: self.config.profile,
                    config: &self.config.structured,
                };
                match run_structured_pipeline(q, &ctx, &trace) {
                    Ok(run) => structured_run = Some(run),
                    Err(e) => return Err(self.fail(&trace, &q.id, e)),
                }
            }
        }
        let structured = structured_run.as_ref().and_then(|r| r.evidence().cloned());

        let unstructured = if modality.uses_notes() {
            match self.retrieve(q, structured.as_ref(), &trace) {
                Ok(u) => Some(u),
                Err(e) => return Err(self.fail(&trace, &q.id, e)),
            }
        } else {
            None
        };

        let evidence = EvidenceBundle { question: q.clone(), structured, unstructured };
        let answer = if modality == Modality::Unstructured {
            let chunks = evidence.unstructured.as_ref().map(|u| u.chunks.as_slice()).unwrap_or(&[]);
            if chunks.is_empty() {
                AnswerRecord {
                    question_id: q.id.clone(),
                    sql_section: String::new(),
                    notes_evidence_section: String::new(),
                    response_section: INSUFFICIENT_EVIDENCE.to_owned(),
                    raw_model_output: String::new(),
                }
            } else {
                match answer_notes_only(q, chunks, &self.gateway, &trace) {
                    Ok(text) => AnswerRecord {
                        question_id: q.id.clone(),
                        sql_section: String::new(),
                        notes_evidence_section: String::new(),
                        response_section: text.clone(),
                        raw_model_output: text,
                    },
                    Err(e) => return Err(self.fail(&trace, &q.id, e)),
                }
            }
        } else {
            match synthesize(&evidence, &self.gateway, &trace) {
                Ok(a) => a,
                Err(e) => return Err(self.fail(&trace, &q.id, e)),
            }
        };
        Ok(AskOutcome { answer, evidence, structured_run, modality, trace: trace.snapshot(&q.id) })
    }
}
