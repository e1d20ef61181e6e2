use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::guard::split_statements;
use super::pipeline::SqlAttempt;
use super::schema::TableSample;
use super::{ADMISSION_PARAM, PATIENT_PARAM};
use crate::llm::{Gateway, LlmError, PromptTemplate, RoleTag};
use crate::model::{DatasetProfile, Question, TableDescription, TableRef};
use crate::trace::TraceRecorder;

/// Header under which failed attempts are appended to the schema block.
pub const FEEDBACK_HEADER: &str = "Previous attempt failed:";

const DIALECT: &str = "SQLite";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WriteError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no SQL statement found in model reply")]
    NoSql { raw: String },
    #[error("model reply contains {count} statements; exactly one is allowed")]
    MultiStatement { sql: String, count: usize },
}

/// Everything the writer sees about one selected table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableContext {
    pub table: TableRef,
    pub sample: TableSample,
    pub description: TableDescription,
}

fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((cut, _)) => format!("{}...", &s[..cut]),
        None => s.to_owned(),
    }
}

/// Renders the `{schema}` slot: one block per table with description,
/// typed columns, keys and the sampled row as `col=value` pairs, then the
/// bindable parameters, then any failed attempts.
pub fn render_schema_block(
    contexts: &[TableContext],
    q: &Question,
    prior_failures: &[SqlAttempt],
    value_chars: usize,
) -> String {
    let mut out = String::new();
    for (i, ctx) in contexts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let t = &ctx.table;
        let _ = writeln!(out, "Table: {}", t.name);
        let _ = writeln!(out, "Description: {}", ctx.description.description);
        let cols: Vec<String> = t
            .columns
            .iter()
            .map(|c| if c.data_type.is_empty() { c.name.clone() } else { format!("{} ({})", c.name, c.data_type) })
            .collect();
        let _ = writeln!(out, "Columns: {}", cols.join(", "));
        if !t.primary_keys.is_empty() {
            let _ = writeln!(out, "Primary keys: {}", t.primary_keys.join(", "));
        }
        if !t.foreign_keys.is_empty() {
            let fks: Vec<String> =
                t.foreign_keys.iter().map(|fk| format!("{} -> {}.{}", fk.column, fk.ref_table, fk.ref_column)).collect();
            let _ = writeln!(out, "Foreign keys: {}", fks.join(", "));
        }
        match &ctx.sample.sample_row {
            Some(row) => {
                let pairs: Vec<String> = ctx
                    .sample
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| format!("{c}={}", truncate_chars(&v.to_string(), value_chars)))
                    .collect();
                let _ = writeln!(out, "Sample row: {}", pairs.join("; "));
            }
            None => out.push_str("Sample row: (table is empty)\n"),
        }
    }
    let mut params = Vec::new();
    if let Some(p) = &q.patient_scope {
        params.push(format!("{PATIENT_PARAM} = {p} (the patient in scope)"));
    }
    if let Some(a) = &q.admission_scope {
        params.push(format!("{ADMISSION_PARAM} = {a} (the admission in scope)"));
    }
    if !params.is_empty() {
        out.push_str("\nBound parameters (use these names instead of literal values):\n");
        for p in params {
            let _ = writeln!(out, "- {p}");
        }
    }
    if !prior_failures.is_empty() {
        let _ = writeln!(out, "\n{FEEDBACK_HEADER}");
        for a in prior_failures {
            let _ = writeln!(out, "Attempt {} SQL: {}", a.attempt_number, a.sql);
            let _ = writeln!(out, "Attempt {} error ({}): {}", a.attempt_number, a.outcome.label(), a.outcome.message());
        }
    }
    out.trim_end().to_owned()
}

fn template_for(gateway: &Gateway, profile: DatasetProfile) -> &PromptTemplate {
    let prompts = gateway.prompts();
    match profile {
        DatasetProfile::Drugehrqa => &prompts.drugehrqa_sql,
        DatasetProfile::Omop => &prompts.omop_sql,
        DatasetProfile::Fixture | DatasetProfile::Ehrsql | DatasetProfile::Ehrnoteqa => &prompts.ehrsql_sql,
    }
}

/// Renders the profile's SQL prompt, asks the SQL writer and extracts the
/// single statement from its reply.
pub fn write_sql(
    q: &Question,
    contexts: &[TableContext],
    profile: DatasetProfile,
    gateway: &Gateway,
    prior_failures: &[SqlAttempt],
    value_chars: usize,
    trace: &TraceRecorder,
) -> Result<String, WriteError> {
    let bindings = BTreeMap::from([
        ("schema", render_schema_block(contexts, q, prior_failures, value_chars)),
        ("query_str", q.text.clone()),
        ("dialect", DIALECT.to_owned()),
    ]);
    let template = template_for(gateway, profile);
    // templates without a {dialect} slot simply ignore that binding
    let prompt = template.render(&bindings)?;
    let reply = gateway.complete(&gateway.request(RoleTag::SqlWriter, prompt), trace)?;
    extract_sql(&reply.text, profile)
}

fn from_json(reply: &str) -> Option<String> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end <= start {
        return None;
    }
    let value: serde_json::Value = serde_json::from_str(&reply[start..=end]).ok()?;
    let obj = value.as_object()?;
    obj.iter().find(|(k, _)| k.eq_ignore_ascii_case("sql")).and_then(|(_, v)| v.as_str()).map(str::to_owned)
}

fn from_fence(reply: &str) -> Option<String> {
    let open = reply.find("```")?;
    let after = &reply[open + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let close = body.find("```")?;
    Some(body[..close].to_owned())
}

const STOP_MARKERS: [&str; 4] = ["sqlresult:", "answer:", "question:", "```"];

fn cut_at_stop(text: &str) -> &str {
    let lower = text.to_ascii_lowercase();
    let end = STOP_MARKERS.iter().filter_map(|m| lower.find(m)).min().unwrap_or(text.len());
    &text[..end]
}

fn from_sqlquery_line(reply: &str) -> Option<String> {
    let lower = reply.to_ascii_lowercase();
    let pos = lower.find("sqlquery:")?;
    Some(cut_at_stop(&reply[pos + "sqlquery:".len()..]).to_owned())
}

fn from_bare(reply: &str) -> Option<String> {
    let trimmed = reply.trim_start();
    let head: String = trimmed.chars().take(6).collect::<String>().to_ascii_uppercase();
    if head.starts_with("SELECT") || head.starts_with("WITH") || head.starts_with("VALUES") {
        Some(cut_at_stop(trimmed).to_owned())
    } else {
        None
    }
}

/// Pulls one SQL statement out of a model reply.
///
/// The OMOP profile expects `{"SQL": ...}` and tries that shape first; the
/// other profiles look for a `SQLQuery:` line, then a fenced block, then a
/// reply that is itself a query. A trailing semicolon is dropped.
pub fn extract_sql(reply: &str, profile: DatasetProfile) -> Result<String, WriteError> {
    let candidates: [fn(&str) -> Option<String>; 4] = if profile == DatasetProfile::Omop {
        [from_json, from_sqlquery_line, from_fence, from_bare]
    } else {
        [from_sqlquery_line, from_fence, from_bare, from_json]
    };
    let sql = candidates
        .iter()
        .filter_map(|f| f(reply))
        .map(|s| s.trim().to_owned())
        .find(|s| !s.is_empty() && !s.trim_end_matches(';').trim().is_empty())
        .ok_or_else(|| WriteError::NoSql { raw: reply.to_owned() })?;
    let statements: Vec<String> = split_statements(&sql)
        .unwrap_or_else(|_| vec![sql.as_str()])
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    match statements.len() {
        0 => Err(WriteError::NoSql { raw: reply.to_owned() }),
        1 => Ok(statements[0].trim().to_owned()),
        count => Err(WriteError::MultiStatement { sql, count }),
    }
}
