//! Answer synthesis: renders the joint evidence into the answer prompt and
//! parses the three-section reply.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{Gateway, LlmError, PromptSet, RoleTag};
use crate::model::{AnswerRecord, Question, ScoredChunk, StructuredEvidence, UnstructuredEvidence};
use crate::notes::serialize_structured_for_query;
use crate::trace::TraceRecorder;

/// Placeholder for an evidence arm that produced nothing.
pub const ABSENT: &str = "(none)";

/// Response used when neither arm found evidence and the model reply could
/// not be parsed.
pub const INSUFFICIENT_EVIDENCE: &str = "Insufficient evidence found to answer this question.";

/// Result rows shown to the synthesizer.
pub const SYNTHESIS_MAX_ROWS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("synthesizer reply has no Response section")]
    Parse { raw: String },
    #[error("no note context to answer from")]
    EmptyContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub question: Question,
    pub structured: Option<StructuredEvidence>,
    pub unstructured: Option<UnstructuredEvidence>,
}

impl EvidenceBundle {
    /// True when neither arm carries anything the synthesizer could cite:
    /// no result rows and no note chunks.
    pub fn is_insufficient(&self) -> bool {
        let no_rows = self.structured.as_ref().is_none_or(|s| s.rows.is_empty());
        let no_chunks = self.unstructured.as_ref().is_none_or(|u| u.chunks.is_empty());
        no_rows && no_chunks
    }
}

fn render_notes(chunks: &[ScoredChunk]) -> String {
    chunks.iter().map(|c| c.chunk.text.as_str()).collect::<Vec<_>>().join("\n\n")
}

/// Fills the answer prompt. Absent arms render as `(none)`; note chunks keep
/// their timestamp prefixes.
pub fn render_synthesis_prompt(bundle: &EvidenceBundle, prompts: &PromptSet) -> Result<String, LlmError> {
    let (sql, rows) = match &bundle.structured {
        Some(s) => (s.sql.clone(), serialize_structured_for_query(s, SYNTHESIS_MAX_ROWS)),
        None => (ABSENT.to_owned(), ABSENT.to_owned()),
    };
    let notes = match &bundle.unstructured {
        Some(u) if !u.chunks.is_empty() => render_notes(&u.chunks),
        _ => ABSENT.to_owned(),
    };
    let bindings = BTreeMap::from([
        ("query_str", bundle.question.text.clone()),
        ("sql_query", sql),
        ("context_str", rows),
        ("notes", notes),
    ]);
    prompts.answer_synthesis.render(&bindings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Sql,
    Notes,
    Response,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)^[ \t>#*_-]*(?:\d+\s*[.)]\s*)?[*_]*(sql\s*query|evidence\s+from\s+(?:the\s+)?notes|response)[*_]*\s*:[*_]*[ \t]*",
        )
        .expect("valid header pattern")
    })
}

/// Splits a synthesizer reply into its sections. Headers may be numbered or
/// not and are matched case-insensitively; only `Response` is required.
pub fn parse_answer(raw: &str, question_id: &str) -> Result<AnswerRecord, SynthesisError> {
    let headers: Vec<(Section, usize, usize)> = header_re()
        .captures_iter(raw)
        .map(|c| {
            let whole = c.get(0).expect("group 0");
            let name = c[1].to_ascii_lowercase();
            let section = if name.starts_with("sql") {
                Section::Sql
            } else if name.starts_with("evidence") {
                Section::Notes
            } else {
                Section::Response
            };
            (section, whole.start(), whole.end())
        })
        .collect();
    let body = |want: Section| -> Option<String> {
        let pos = headers.iter().position(|(s, _, _)| *s == want)?;
        let end = headers.get(pos + 1).map(|h| h.1).unwrap_or(raw.len());
        Some(raw[headers[pos].2..end].trim().to_owned())
    };
    let response = body(Section::Response).ok_or_else(|| SynthesisError::Parse { raw: raw.to_owned() })?;
    Ok(AnswerRecord {
        question_id: question_id.to_owned(),
        sql_section: body(Section::Sql).unwrap_or_default(),
        notes_evidence_section: body(Section::Notes).unwrap_or_default(),
        response_section: response,
        raw_model_output: raw.to_owned(),
    })
}

/// Renders a parsed answer back into the numbered three-section layout.
pub fn format_answer(answer: &AnswerRecord) -> String {
    format!(
        "1. SQL QUERY: {}\n2. Evidence from notes: {}\n3. Response: {}",
        answer.sql_section, answer.notes_evidence_section, answer.response_section
    )
}

/// Asks the answer synthesizer and parses its reply.
///
/// When the bundle is insufficient and the reply cannot be parsed, the
/// answer falls back to [`INSUFFICIENT_EVIDENCE`] instead of failing.
pub fn synthesize(bundle: &EvidenceBundle, gateway: &Gateway, trace: &TraceRecorder) -> Result<AnswerRecord, SynthesisError> {
    let prompt = render_synthesis_prompt(bundle, gateway.prompts())?;
    let reply = gateway.complete(&gateway.request(RoleTag::AnswerSynthesizer, prompt), trace)?;
    match parse_answer(&reply.text, &bundle.question.id) {
        Ok(answer) => Ok(answer),
        Err(SynthesisError::Parse { raw }) if bundle.is_insufficient() => Ok(AnswerRecord {
            question_id: bundle.question.id.clone(),
            sql_section: String::new(),
            notes_evidence_section: String::new(),
            response_section: INSUFFICIENT_EVIDENCE.to_owned(),
            raw_model_output: raw,
        }),
        Err(e) => Err(e),
    }
}

/// One-sentence answer from note context alone, without section parsing.
pub fn answer_notes_only(
    q: &Question,
    chunks: &[ScoredChunk],
    gateway: &Gateway,
    trace: &TraceRecorder,
) -> Result<String, SynthesisError> {
    if chunks.is_empty() {
        return Err(SynthesisError::EmptyContext);
    }
    let bindings = BTreeMap::from([("enhanced_bge", render_notes(chunks)), ("query", q.text.clone())]);
    let prompt = gateway.prompts().note_qa.render(&bindings)?;
    let reply = gateway.complete(&gateway.request(RoleTag::NoteQa, prompt), trace)?;
    Ok(reply.text.trim().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_sections() {
        let raw = "1. SQL QUERY: SELECT 1\n2. Evidence from notes: note says 81 mg\n2. Response: 81 mg";
        let a = parse_answer(raw, "q1").unwrap();
        assert_eq!(a.sql_section, "SELECT 1");
        assert_eq!(a.notes_evidence_section, "note says 81 mg");
        assert_eq!(a.response_section, "81 mg");
        assert_eq!(a.raw_model_output, raw);
    }

    #[test]
    fn unnumbered_case_insensitive_multiline() {
        let raw = "sql query:\nSELECT a\nFROM t\n\nRESPONSE: line one\nline two";
        let a = parse_answer(raw, "q").unwrap();
        assert_eq!(a.sql_section, "SELECT a\nFROM t");
        assert_eq!(a.notes_evidence_section, "");
        assert_eq!(a.response_section, "line one\nline two");
    }

    #[test]
    fn markdown_headers() {
        let a = parse_answer("**1. SQL QUERY:** x\n**3. Response:** y", "q").unwrap();
        assert_eq!((a.sql_section.as_str(), a.response_section.as_str()), ("x", "y"));
    }

    #[test]
    fn free_text_is_a_parse_error() {
        let err = parse_answer("The dose was 81 mg.", "q").unwrap_err();
        assert_eq!(err, SynthesisError::Parse { raw: "The dose was 81 mg.".into() });
    }

    #[test]
    fn reparse_of_formatted_answer_is_stable() {
        let a = parse_answer("SQL QUERY: s\nEvidence from notes: e\nResponse: r", "q").unwrap();
        let b = parse_answer(&format_answer(&a), "q").unwrap();
        assert_eq!(
            (a.sql_section, a.notes_evidence_section, a.response_section),
            (b.sql_section, b.notes_evidence_section, b.response_section)
        );
    }

    #[test]
    fn absent_arms_render_as_none() {
        let bundle = EvidenceBundle { question: Question::new("q", "dose?").unwrap(), structured: None, unstructured: None };
        let prompt = render_synthesis_prompt(&bundle, &PromptSet::builtin()).unwrap();
        assert!(prompt.contains("- SQL Query: (none)"));
        assert!(prompt.contains("- SQL Response: (none)"));
        assert!(prompt.contains("- Notes: (none)"));
        assert!(bundle.is_insufficient());
    }
}
