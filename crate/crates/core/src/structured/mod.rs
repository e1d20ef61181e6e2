//! Structured arm: answers a question from the relational tables.
//!
//! The flow per question is discover → describe (cached) → select top-k
//! tables → sample one row per selected table → write SQL → execute, with
//! failed executions fed back to the writer up to `max_attempts` times.

mod db;
mod describe;
mod executor;
mod guard;
pub(crate) mod pipeline;
mod schema;
mod select;
mod writer;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use db::{Database, DbError};
pub use describe::{describe_table, DescribeError, DescriptionCache};
pub use executor::{execute_sql, ErrorClass, ExecError, ExecutionResult, SqlParams};
pub use guard::{check_read_only, split_statements, RejectKind};
pub use pipeline::{run_structured_pipeline, scope_value, SqlAttempt, SqlOutcome, StructuredContext, StructuredError, StructuredFailure, StructuredRun};
pub use schema::{discover_schema, sample_table, SchemaCatalog, TableSample};
pub use select::{description_text, select_tables};
pub use writer::{extract_sql, render_schema_block, write_sql, TableContext, WriteError, FEEDBACK_HEADER};

/// Named parameters the pipeline binds from the question's scope.
pub const PATIENT_PARAM: &str = ":patient_id";
pub const ADMISSION_PARAM: &str = ":admission_id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredConfig {
    pub max_attempts: u32,
    pub timeout_s: f64,
    pub table_k: usize,
    pub sample_value_chars: usize,
}

impl Default for StructuredConfig {
    fn default() -> Self {
        Self { max_attempts: 3, timeout_s: 120.0, table_k: 10, sample_value_chars: 120 }
    }
}

impl StructuredConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }
}
