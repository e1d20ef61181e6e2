//! Shared domain types: questions, schema references, notes, evidence,
//! answers and traces.
//!
//! Every record serializes to one JSON object per line (see [`write_jsonl`]),
//! which is the on-disk format of the trace store, the description cache and
//! benchmark reports.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SubsecRound, TimeZone, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("invalid table `{table}`: {reason}")]
    InvalidTable { table: String, reason: String },
    #[error("invalid timestamp `{0}`")]
    InvalidTimestamp(String),
    #[error("unknown dataset profile `{0}`")]
    UnknownProfile(String),
}

/// A UTC instant with second precision.
///
/// Renders as `YYYY-MM-DD HH:MM:SS`, the layout MIMIC-style tables use.
/// Parsing accepts that layout, ISO-8601 with a `T` separator, RFC 3339
/// with an offset (converted to UTC) and bare dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

impl Timestamp {
    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Self(dt.trunc_subsecs(0))
    }

    pub fn now() -> Self {
        Self::from_datetime(Utc::now())
    }

    pub fn from_unix(secs: i64) -> Option<Self> {
        Utc.timestamp_opt(secs, 0).single().map(Self)
    }

    pub fn unix(&self) -> i64 {
        self.0.timestamp()
    }
}

impl FromStr for Timestamp {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(Self::from_datetime(dt.with_timezone(&Utc)));
        }
        for layout in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
            if let Ok(naive) = NaiveDateTime::parse_from_str(s.trim_end_matches('Z'), layout) {
                return Ok(Self::from_datetime(naive.and_utc()));
            }
        }
        if let Ok(date) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            let naive = date.and_hms_opt(0, 0, 0).expect("midnight is valid");
            return Ok(Self::from_datetime(naive.and_utc()));
        }
        Err(ModelError::InvalidTimestamp(s.to_owned()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%d %H:%M:%S"))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    Lab,
    Drug,
    LabDrugCombination,
    Other,
}

impl QuestionCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lab => "lab",
            Self::Drug => "drug",
            Self::LabDrugCombination => "lab_drug_combination",
            Self::Other => "other",
        }
    }
}

/// Inclusive time window used by the fallback temporal filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeWindow {
    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts <= self.end
    }
}

/// Optional retrieval hints carried by a question. Only consulted when the
/// notes arm runs without structured evidence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteFilters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_window: Option<TimeWindow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sections: Vec<String>,
}

impl NoteFilters {
    pub fn is_empty(&self) -> bool {
        self.time_window.is_none() && self.sections.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_scope: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admission_scope: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<QuestionCategory>,
    #[serde(default, skip_serializing_if = "NoteFilters::is_empty")]
    pub filters: NoteFilters,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let q = Self {
            id: id.into(),
            text: text.into(),
            patient_scope: None,
            admission_scope: None,
            category: None,
            filters: NoteFilters::default(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_patient(mut self, patient: impl Into<String>) -> Self {
        self.patient_scope = Some(patient.into());
        self
    }

    pub fn with_admission(mut self, admission: impl Into<String>) -> Self {
        self.admission_scope = Some(admission.into());
        self
    }

    pub fn with_category(mut self, category: QuestionCategory) -> Self {
        self.category = Some(category);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if text::collapse_whitespace(&self.text).is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub data_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub ref_table: String,
    pub ref_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRef {
    pub name: String,
    pub columns: Vec<Column>,
    #[serde(default)]
    pub primary_keys: Vec<String>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableRef {
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| ModelError::InvalidTable { table: self.name.clone(), reason };
        let mut seen = std::collections::HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(invalid(format!("duplicate column `{}`", c.name)));
            }
        }
        let keyed = self
            .primary_keys
            .iter()
            .chain(self.foreign_keys.iter().map(|fk| &fk.column));
        for key in keyed {
            if !seen.contains(key.as_str()) {
                return Err(invalid(format!("key column `{key}` is not a column")));
            }
        }
        Ok(())
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// Content hash of a table's structure.
///
/// Column order is significant; primary and foreign key lists are sorted
/// before hashing so that metadata enumeration order does not matter.
pub fn fingerprint_schema(table: &TableRef) -> String {
    let mut pks = table.primary_keys.clone();
    pks.sort();
    let mut fks = table.foreign_keys.clone();
    fks.sort();
    let mut canon = String::new();
    canon.push_str("table\x1f");
    canon.push_str(&table.name);
    for c in &table.columns {
        canon.push_str("\x1ecol\x1f");
        canon.push_str(&c.name);
        canon.push('\x1f');
        canon.push_str(&c.data_type);
    }
    for pk in &pks {
        canon.push_str("\x1epk\x1f");
        canon.push_str(pk);
    }
    for fk in &fks {
        canon.push_str("\x1efk\x1f");
        canon.push_str(&fk.column);
        canon.push('\x1f');
        canon.push_str(&fk.ref_table);
        canon.push('\x1f');
        canon.push_str(&fk.ref_column);
    }
    text::sha256_hex(canon.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDescription {
    pub table: String,
    pub description: String,
    pub schema_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteDocument {
    pub id: String,
    #[serde(alias = "patient")]
    pub patient_scope: String,
    pub timestamp: Timestamp,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteChunk {
    pub note_id: String,
    pub index: usize,
    /// Half-open `[start, end)` range in the note's token stream.
    pub token_span: (usize, usize),
    pub timestamp: Timestamp,
    /// `"[timestamp] "` followed by the chunk body.
    pub text: String,
    /// Section headers active anywhere inside the chunk, lowercased.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sections: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl NoteChunk {
    pub fn prefix(timestamp: Timestamp) -> String {
        format!("[{timestamp}] ")
    }

    /// Chunk text with the timestamp prefix removed.
    pub fn body(&self) -> &str {
        let prefix = Self::prefix(self.timestamp);
        self.text.strip_prefix(prefix.as_str()).unwrap_or(&self.text)
    }

    pub fn token_count(&self) -> usize {
        self.token_span.1 - self.token_span.0
    }

    /// Index key: note id plus zero-padded ordinal, so lexicographic key
    /// order follows document order.
    pub fn key(&self) -> String {
        format!("{}#{:05}", self.note_id, self.index)
    }
}

/// A single SQL result cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SqlValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
}

impl fmt::Display for SqlValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SqlValue::Null => f.write_str("NULL"),
            SqlValue::Integer(v) => write!(f, "{v}"),
            SqlValue::Real(v) => write!(f, "{v}"),
            SqlValue::Text(v) => f.write_str(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredEvidence {
    pub sql: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<SqlValue>>,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: NoteChunk,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstructuredEvidence {
    pub chunks: Vec<ScoredChunk>,
    pub k_used: usize,
    pub fallback_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub sql_section: String,
    pub notes_evidence_section: String,
    pub response_section: String,
    pub raw_model_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    TableReviewer,
    TableSelector,
    SqlSampler,
    SqlWriter,
    SqlExecutor,
    NoteIndexer,
    NoteRetriever,
    AnswerSynthesizer,
    NoteQa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub agent: AgentRole,
    pub tool: String,
    pub input_digest: String,
    pub output_digest: String,
    pub wall_ms: u64,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub question_id: String,
    pub steps: Vec<TraceStep>,
    pub total_latency_ms: u64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub total_cost: f64,
}

impl TraceRecord {
    /// Builds a record whose token and cost totals are the step sums.
    pub fn from_steps(
        trace_id: impl Into<String>,
        question_id: impl Into<String>,
        steps: Vec<TraceStep>,
        total_latency_ms: u64,
    ) -> Self {
        let total_prompt_tokens = steps.iter().map(|s| s.prompt_tokens).sum();
        let total_completion_tokens = steps.iter().map(|s| s.completion_tokens).sum();
        let total_cost = steps.iter().map(|s| s.cost).sum();
        let step_ms: u64 = steps.iter().map(|s| s.wall_ms).sum();
        Self {
            trace_id: trace_id.into(),
            question_id: question_id.into(),
            steps,
            total_latency_ms: total_latency_ms.max(step_ms),
            total_prompt_tokens,
            total_completion_tokens,
            total_cost,
        }
    }

    pub fn llm_calls(&self) -> usize {
        self.steps.iter().filter(|s| s.tool == crate::llm::CHAT_TOOL).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Structured,
    Unstructured,
    Multimodal,
}

impl Modality {
    pub fn uses_tables(&self) -> bool {
        matches!(self, Self::Structured | Self::Multimodal)
    }

    pub fn uses_notes(&self) -> bool {
        matches!(self, Self::Unstructured | Self::Multimodal)
    }
}

/// Dataset profile. Selects the SQL prompt, how SQL is pulled out of the
/// model reply, and which metric scores the answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetProfile {
    Fixture,
    Ehrsql,
    Drugehrqa,
    Ehrnoteqa,
    Omop,
}

impl DatasetProfile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Fixture => "fixture",
            Self::Ehrsql => "ehrsql",
            Self::Drugehrqa => "drugehrqa",
            Self::Ehrnoteqa => "ehrnoteqa",
            Self::Omop => "omop",
        }
    }

    pub fn default_modality(&self) -> Modality {
        match self {
            Self::Ehrsql => Modality::Structured,
            Self::Ehrnoteqa => Modality::Unstructured,
            Self::Fixture | Self::Drugehrqa | Self::Omop => Modality::Multimodal,
        }
    }
}

impl FromStr for DatasetProfile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fixture" => Ok(Self::Fixture),
            "ehrsql" => Ok(Self::Ehrsql),
            "drugehrqa" => Ok(Self::Drugehrqa),
            "ehrnoteqa" => Ok(Self::Ehrnoteqa),
            "omop" | "ynhhqa" => Ok(Self::Omop),
            other => Err(ModelError::UnknownProfile(other.to_owned())),
        }
    }
}

impl fmt::Display for DatasetProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("encode: {0}")]
    Encode(serde_json::Error),
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, records: &[T]) -> Result<(), JsonlError> {
    for r in records {
        append_jsonl(&mut out, r)?;
    }
    Ok(())
}

pub fn append_jsonl<W: Write, T: Serialize>(out: &mut W, record: &T) -> Result<(), JsonlError> {
    let line = serde_json::to_string(record).map_err(JsonlError::Encode)?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads one record per non-blank line; line numbers in errors are 1-based.
pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(input: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| JsonlError::Parse { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}
