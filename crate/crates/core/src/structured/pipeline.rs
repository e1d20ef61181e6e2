use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::db::{Database, DbError};
use super::describe::{describe_table, DescribeError, DescriptionCache};
use super::executor::{execute_sql, ExecError, ExecutionResult, SqlParams};
use super::schema::{discover_schema, sample_table};
use super::select::select_from_index;
use super::writer::{write_sql, TableContext, WriteError};
use super::{StructuredConfig, ADMISSION_PARAM, PATIENT_PARAM};
use crate::embedding::{EmbedError, Embedder, VectorIndex};
use crate::llm::{Gateway, LlmError};
use crate::model::{AgentRole, DatasetProfile, Question, SqlValue, StructuredEvidence};
use crate::trace::TraceRecorder;

/// What one generate-and-execute round produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SqlOutcome {
    Rows { result: ExecutionResult },
    /// The query ran and matched nothing. Counts as success.
    EmptyResult { columns: Vec<String> },
    SyntaxError { message: String },
    SchemaError { message: String },
    Timeout { elapsed_ms: u64, limit_ms: u64 },
    /// Refused before execution: not read-only, several statements, or no
    /// SQL at all in the writer's reply.
    Rejected { message: String },
}

impl SqlOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Self::Rows { .. } | Self::EmptyResult { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Rows { .. } => "rows",
            Self::EmptyResult { .. } => "empty_result",
            Self::SyntaxError { .. } => "syntax_error",
            Self::SchemaError { .. } => "schema_error",
            Self::Timeout { .. } => "timeout",
            Self::Rejected { .. } => "rejected",
        }
    }

    /// What the outcome says about the data, without timings, so the same
    /// query over the same data always gives the same key.
    pub fn content_key(&self) -> String {
        let body = match self {
            Self::Rows { result } => serde_json::to_string(&(&result.columns, &result.rows)).unwrap_or_default(),
            Self::EmptyResult { columns } => serde_json::to_string(columns).unwrap_or_default(),
            Self::Timeout { limit_ms, .. } => limit_ms.to_string(),
            Self::SyntaxError { message } | Self::SchemaError { message } | Self::Rejected { message } => message.clone(),
        };
        format!("{}:{body}", self.label())
    }

    pub fn message(&self) -> String {
        match self {
            Self::Rows { result } => format!("{} rows", result.rows.len()),
            Self::EmptyResult { .. } => "query returned no rows".to_owned(),
            Self::SyntaxError { message } | Self::SchemaError { message } | Self::Rejected { message } => message.clone(),
            Self::Timeout { limit_ms, .. } => format!("query exceeded the {limit_ms} ms time limit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlAttempt {
    pub attempt_number: u32,
    pub sql: String,
    pub params: SqlParams,
    pub outcome: SqlOutcome,
    pub duration_ms: u64,
}

/// The structured arm gave up: every attempt failed, or there was nothing
/// to query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredFailure {
    pub reason: String,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredRun {
    pub selected_tables: Vec<String>,
    pub attempts: Vec<SqlAttempt>,
    pub outcome: Result<StructuredEvidence, StructuredFailure>,
}

impl StructuredRun {
    pub fn evidence(&self) -> Option<&StructuredEvidence> {
        self.outcome.as_ref().ok()
    }
}

/// Infrastructure failures that abort the run instead of feeding the
/// repair loop.
#[derive(Debug, Error)]
pub enum StructuredError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Describe(#[from] DescribeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("database unavailable: {0}")]
    Unavailable(String),
}

/// Shared, read-only handles the structured arm needs.
pub struct StructuredContext<'a> {
    pub db: &'a Database,
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn Embedder,
    pub cache: &'a DescriptionCache,
    pub profile: DatasetProfile,
    pub config: &'a StructuredConfig,
}

/// Binds a scope id as an integer when it parses as one, else as text.
pub fn scope_value(raw: &str) -> SqlValue {
    raw.trim().parse::<i64>().map(SqlValue::Integer).unwrap_or_else(|_| SqlValue::Text(raw.to_owned()))
}

pub(crate) fn scope_params(q: &Question) -> SqlParams {
    let mut params = SqlParams::new();
    if let Some(p) = &q.patient_scope {
        params.insert(PATIENT_PARAM.to_owned(), scope_value(p));
    }
    if let Some(a) = &q.admission_scope {
        params.insert(ADMISSION_PARAM.to_owned(), scope_value(a));
    }
    params
}

fn outcome_of(result: Result<ExecutionResult, ExecError>) -> Result<SqlOutcome, StructuredError> {
    Ok(match result {
        Ok(r) if r.rows.is_empty() => SqlOutcome::EmptyResult { columns: r.columns },
        Ok(r) => SqlOutcome::Rows { result: r },
        Err(ExecError::Syntax(message)) => SqlOutcome::SyntaxError { message },
        Err(ExecError::Schema(message)) => SqlOutcome::SchemaError { message },
        Err(ExecError::Timeout { elapsed_ms, limit_ms }) => SqlOutcome::Timeout { elapsed_ms, limit_ms },
        Err(e @ ExecError::Rejected { .. }) => SqlOutcome::Rejected { message: e.to_string() },
        Err(ExecError::Unavailable(m)) => return Err(StructuredError::Unavailable(m)),
    })
}

/// Runs discovery, description, selection, sampling and the bounded
/// write-execute-repair loop for one question.
pub fn run_structured_pipeline(
    q: &Question,
    ctx: &StructuredContext<'_>,
    trace: &TraceRecorder,
) -> Result<StructuredRun, StructuredError> {
    let started = trace.now_ms();
    let catalog = discover_schema(ctx.db)?;
    let names: Vec<&str> = catalog.tables.iter().map(|t| t.name.as_str()).collect();
    trace.record_tool(AgentRole::TableReviewer, "discover_schema", ctx.db.id(), &names.join(","), started);
    if catalog.tables.is_empty() {
        return Ok(StructuredRun {
            selected_tables: Vec::new(),
            attempts: Vec::new(),
            outcome: Err(StructuredFailure { reason: "database has no tables".into(), attempt_count: 0 }),
        });
    }

    let mut descriptions = Vec::with_capacity(catalog.tables.len());
    for table in &catalog.tables {
        descriptions.push(describe_table(table, ctx.db.id(), ctx.gateway, ctx.cache, trace)?);
    }

    let started = trace.now_ms();
    let mut index = VectorIndex::new();
    for d in &descriptions {
        let v = ctx.cache.description_vector(ctx.db.id(), d, ctx.embedder)?;
        index.insert(d.table.clone(), v, d.schema_fingerprint.clone())?;
    }
    let selected = select_from_index(q, &index, ctx.embedder, ctx.config.table_k.max(1))?;
    trace.record_tool(AgentRole::TableSelector, "select_tables", &q.text, &selected.join(","), started);

    let mut contexts = Vec::with_capacity(selected.len());
    for name in &selected {
        let started = trace.now_ms();
        let sample = sample_table(ctx.db, name)?;
        trace.record_tool(
            AgentRole::SqlSampler,
            "sample_table",
            name,
            &serde_json::to_string(&sample.sample_row).unwrap_or_default(),
            started,
        );
        let table = catalog.table(name).cloned().ok_or_else(|| DbError::UnknownTable(name.clone()))?;
        let description = descriptions.iter().find(|d| &d.table == name).cloned().expect("every table was described");
        contexts.push(TableContext { table, sample, description });
    }

    let params = scope_params(q);
    let max_attempts = ctx.config.max_attempts.max(1);
    let mut attempts: Vec<SqlAttempt> = Vec::new();
    for attempt_number in 1..=max_attempts {
        let started = trace.now_ms();
        let written = write_sql(
            q,
            &contexts,
            ctx.profile,
            ctx.gateway,
            &attempts,
            ctx.config.sample_value_chars,
            trace,
        );
        let (sql, outcome) = match written {
            Ok(sql) => {
                let exec_started = trace.now_ms();
                let outcome = outcome_of(execute_sql(ctx.db, &sql, &params, ctx.config.timeout()))?;
                trace.record_tool(AgentRole::SqlExecutor, "execute_sql", &sql, &outcome.content_key(), exec_started);
                (sql, outcome)
            }
            Err(WriteError::Llm(e)) => return Err(e.into()),
            Err(WriteError::NoSql { raw }) => {
                (raw.trim().to_owned(), SqlOutcome::SyntaxError { message: "no SQL statement found in reply".into() })
            }
            Err(WriteError::MultiStatement { sql, count }) => {
                (sql, SqlOutcome::Rejected { message: format!("{count} statements in reply; exactly one is allowed") })
            }
        };
        let success = outcome.is_success();
        let attempt = SqlAttempt {
            attempt_number,
            sql,
            params: params.clone(),
            outcome,
            duration_ms: trace.now_ms().saturating_sub(started),
        };
        if !success {
            tracing::debug!(attempt_number, outcome = attempt.outcome.label(), "SQL attempt failed");
        }
        attempts.push(attempt);
        if success {
            break;
        }
    }

    let last = attempts.last().expect("at least one attempt");
    let outcome = match &last.outcome {
        SqlOutcome::Rows { result } => Ok(StructuredEvidence {
            sql: last.sql.clone(),
            columns: result.columns.clone(),
            rows: result.rows.clone(),
            attempt_count: last.attempt_number,
        }),
        SqlOutcome::EmptyResult { columns } => Ok(StructuredEvidence {
            sql: last.sql.clone(),
            columns: columns.clone(),
            rows: Vec::new(),
            attempt_count: last.attempt_number,
        }),
        failed => Err(StructuredFailure {
            reason: format!("{}: {}", failed.label(), failed.message()),
            attempt_count: last.attempt_number,
        }),
    };
    Ok(StructuredRun { selected_tables: selected, attempts, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SqlValue;

    fn rows(elapsed_ms: u64, value: i64) -> SqlOutcome {
        SqlOutcome::Rows {
            result: ExecutionResult { columns: vec!["n".into()], rows: vec![vec![SqlValue::Integer(value)]], elapsed_ms },
        }
    }

    #[test]
    fn content_key_ignores_timings() {
        assert_eq!(rows(0, 1).content_key(), rows(37, 1).content_key());
        assert_ne!(rows(0, 1).content_key(), rows(0, 2).content_key());
        let t = |elapsed_ms| SqlOutcome::Timeout { elapsed_ms, limit_ms: 1000 }.content_key();
        assert_eq!(t(1001), t(1100));
        assert_ne!(SqlOutcome::EmptyResult { columns: vec!["n".into()] }.content_key(), rows(0, 1).content_key());
    }
}
