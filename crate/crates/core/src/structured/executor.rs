use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rusqlite::types::{Value, ValueRef};
use rusqlite::{ErrorCode, Statement};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::db::Database;
use super::guard::{check_read_only, RejectKind};
use crate::model::SqlValue;

/// Named parameters, keyed with their sigil (`":patient_id"`).
pub type SqlParams = BTreeMap<String, SqlValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<SqlValue>>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Rejected,
    Syntax,
    Schema,
    Timeout,
    Unavailable,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("statement rejected ({kind:?}): {message}")]
    Rejected { kind: RejectKind, message: String },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("query exceeded the {limit_ms} ms time limit (ran {elapsed_ms} ms)")]
    Timeout { elapsed_ms: u64, limit_ms: u64 },
    #[error("database unavailable: {0}")]
    Unavailable(String),
}

impl ExecError {
    pub fn class(&self) -> ErrorClass {
        match self {
            Self::Rejected { .. } => ErrorClass::Rejected,
            Self::Syntax(_) => ErrorClass::Syntax,
            Self::Schema(_) => ErrorClass::Schema,
            Self::Timeout { .. } => ErrorClass::Timeout,
            Self::Unavailable(_) => ErrorClass::Unavailable,
        }
    }
}

const SCHEMA_MARKERS: [&str; 7] = [
    "no such table",
    "no such column",
    "ambiguous column",
    "no such function",
    "has no column named",
    "misuse of aggregate",
    "wrong number of arguments",
];

fn classify(err: rusqlite::Error, started: Instant, limit: Duration) -> ExecError {
    let elapsed_ms = started.elapsed().as_millis() as u64;
    if let rusqlite::Error::SqliteFailure(e, _) = &err {
        if e.code == ErrorCode::OperationInterrupted {
            return ExecError::Timeout { elapsed_ms, limit_ms: limit.as_millis() as u64 };
        }
        if matches!(e.code, ErrorCode::CannotOpen | ErrorCode::NotADatabase | ErrorCode::DatabaseCorrupt) {
            return ExecError::Unavailable(err.to_string());
        }
    }
    let message = match &err {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        other => other.to_string(),
    };
    let lower = message.to_ascii_lowercase();
    if SCHEMA_MARKERS.iter().any(|m| lower.contains(m)) {
        ExecError::Schema(message)
    } else {
        ExecError::Syntax(message)
    }
}

fn to_sql_value(v: &SqlValue) -> Value {
    match v {
        SqlValue::Null => Value::Null,
        SqlValue::Integer(i) => Value::Integer(*i),
        SqlValue::Real(r) => Value::Real(*r),
        SqlValue::Text(t) => Value::Text(t.clone()),
    }
}

pub(crate) fn from_value_ref(v: ValueRef<'_>) -> SqlValue {
    match v {
        ValueRef::Null => SqlValue::Null,
        ValueRef::Integer(i) => SqlValue::Integer(i),
        ValueRef::Real(r) => SqlValue::Real(r),
        ValueRef::Text(t) => SqlValue::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => SqlValue::Text(format!("x'{}'", hex::encode(b))),
    }
}

fn bind_named(stmt: &mut Statement<'_>, params: &SqlParams) -> Result<(), ExecError> {
    for i in 1..=stmt.parameter_count() {
        let name = stmt
            .parameter_name(i)
            .ok_or_else(|| ExecError::Syntax("positional parameters are not supported; use named parameters".into()))?
            .to_owned();
        let value = params
            .get(&name)
            .ok_or_else(|| ExecError::Syntax(format!("unbound parameter {name}")))?;
        stmt.raw_bind_parameter(i, to_sql_value(value))
            .map_err(|e| ExecError::Syntax(e.to_string()))?;
    }
    Ok(())
}

/// Runs one read-only statement with named parameters and a wall-clock
/// budget.
///
/// Statements are screened lexically, then prepared and checked with
/// `sqlite3_stmt_readonly` before any row is stepped. The budget is enforced
/// by a progress handler that interrupts the VM once the deadline passes.
pub fn execute_sql(db: &Database, sql: &str, params: &SqlParams, timeout: Duration) -> Result<ExecutionResult, ExecError> {
    let stmt_text = check_read_only(sql).map_err(|kind| ExecError::Rejected {
        kind,
        message: match kind {
            RejectKind::Empty => "no statement to execute".to_owned(),
            RejectKind::MultiStatement => "exactly one statement is allowed".to_owned(),
            RejectKind::NotReadOnly => "only read-only queries are allowed".to_owned(),
            RejectKind::Malformed => "unterminated string, identifier or comment".to_owned(),
        },
    })?;
    let conn = db.connection().map_err(|e| ExecError::Unavailable(e.to_string()))?;
    let started = Instant::now();
    let deadline = started + timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));
    let result = (|| {
        let mut stmt = conn.prepare(stmt_text).map_err(|e| classify(e, started, timeout))?;
        if !stmt.readonly() {
            return Err(ExecError::Rejected {
                kind: RejectKind::NotReadOnly,
                message: "statement would modify the database".into(),
            });
        }
        bind_named(&mut stmt, params)?;
        let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_owned).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut cursor = stmt.raw_query();
        while let Some(row) = cursor.next().map_err(|e| classify(e, started, timeout))? {
            let mut out = Vec::with_capacity(width);
            for i in 0..width {
                out.push(from_value_ref(row.get_ref(i).map_err(|e| classify(e, started, timeout))?));
            }
            rows.push(out);
        }
        Ok(ExecutionResult { columns, rows, elapsed_ms: started.elapsed().as_millis() as u64 })
    })();
    conn.progress_handler(0, None::<fn() -> bool>);
    result
}
