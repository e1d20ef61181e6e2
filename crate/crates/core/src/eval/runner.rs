use std::collections::BTreeSet;

use rayon::prelude::*;

use super::dataset::BenchmarkItem;
use super::metrics::{exact_match, rouge_l};
use super::report::{ItemError, ItemResult, ReportHeader, RunReport, WarmupSummary};
use crate::model::{StructuredEvidence, TraceRecord};
use crate::navigator::Navigator;
use crate::structured::pipeline::scope_params;
use crate::structured::execute_sql;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Label recorded in the report header.
    pub dataset: String,
    /// Items run at once. 0 means one per available core.
    pub parallelism: usize,
    pub dropped_gold_sql_timeouts: Vec<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { dataset: "benchmark".into(), parallelism: 4, dropped_gold_sql_timeouts: Vec::new() }
    }
}

pub struct BenchmarkRun {
    pub report: RunReport,
    /// One trace per item, in report row order, then the warmup trace.
    pub traces: Vec<TraceRecord>,
}

fn sorted_rows(rows: &[Vec<crate::model::SqlValue>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(ToString::to_string).collect()).collect();
    out.sort();
    out
}

fn execution_match(item: &BenchmarkItem, nav: &Navigator, evidence: &StructuredEvidence) -> Option<bool> {
    let sql = item.gold_sql.as_deref()?;
    let db = nav.database()?;
    let gold = execute_sql(db, sql, &scope_params(&item.question), nav.config().structured.timeout()).ok()?;
    Some(sorted_rows(&gold.rows) == sorted_rows(&evidence.rows))
}

fn run_item(item: &BenchmarkItem, nav: &Navigator) -> (ItemResult, TraceRecord) {
    let (prediction, error, trace, outcome) = match nav.ask(&item.question, item.modality) {
        Ok(o) => (o.answer.response_section.clone(), None, o.trace.clone(), Some(o)),
        Err(e) => {
            let err = ItemError { class: e.failure.class().to_owned(), message: e.failure.to_string() };
            (String::new(), Some(err), *e.trace, None)
        }
    };
    let em = if error.is_some() { 0 } else { exact_match(&prediction, &item.gold_answer) };
    let run = outcome.as_ref().and_then(|o| o.structured_run.as_ref());
    let unstructured = outcome.as_ref().and_then(|o| o.evidence.unstructured.as_ref());
    let result = ItemResult {
        id: item.id().to_owned(),
        category: item.question.category,
        modality: item.modality,
        rouge_l: rouge_l(&prediction, &item.gold_answer.reference_text()),
        prediction,
        gold: item.gold_answer.clone(),
        exact_match: em,
        correct: em == 1,
        verdict: None,
        error,
        sql_attempts: run.map(|r| r.attempts.len() as u32).unwrap_or(0),
        structured_ok: run.map(|r| r.outcome.is_ok()),
        fallback_mode: unstructured.map(|u| u.fallback_mode),
        note_chunks: unstructured.map(|u| u.chunks.len()).unwrap_or(0),
        insufficient_evidence: outcome.as_ref().is_some_and(|o| o.insufficient_evidence()),
        execution_match: run.and_then(|r| r.evidence()).and_then(|e| execution_match(item, nav, e)),
        latency_ms: trace.total_latency_ms,
        llm_calls: trace.llm_calls(),
        prompt_tokens: trace.total_prompt_tokens,
        completion_tokens: trace.total_completion_tokens,
        cost: trace.total_cost,
        trace_id: trace.trace_id.clone(),
    };
    (result, trace)
}

/// Describes the tables and indexes the notes of every patient the items
/// touch, so shared work is not charged to whichever item runs first.
fn warm_up(items: &[BenchmarkItem], nav: &Navigator) -> (WarmupSummary, TraceRecord) {
    let trace = nav.new_trace("warmup");
    let mut summary = WarmupSummary::default();
    if items.iter().any(|i| i.modality.uses_tables()) {
        match nav.warm_descriptions(&trace) {
            Ok(n) => summary.tables_described = n,
            Err(e) => summary.error = Some(format!("describe tables: {e}")),
        }
    }
    let patients: BTreeSet<&str> = items
        .iter()
        .filter(|i| i.modality.uses_notes())
        .filter_map(|i| i.question.patient_scope.as_deref())
        .collect();
    for p in patients {
        match nav.warm_notes(p) {
            Ok(()) => summary.patients_indexed += 1,
            Err(e) => {
                summary.error.get_or_insert_with(|| format!("index notes of {p}: {e}"));
            }
        }
    }
    let record = trace.snapshot("warmup");
    summary.llm_calls = record.llm_calls();
    summary.prompt_tokens = record.total_prompt_tokens;
    summary.completion_tokens = record.total_completion_tokens;
    summary.cost = record.total_cost;
    summary.latency_ms = record.total_latency_ms;
    (summary, record)
}

/// Runs every item through the arms its modality selects and scores it.
///
/// A failing item is recorded as incorrect with its error class; it never
/// stops the run. Rows come back sorted by id, so the report does not
/// depend on item order or scheduling.
pub fn run_benchmark(items: &[BenchmarkItem], nav: &Navigator, options: &RunOptions) -> BenchmarkRun {
    let (warmup, warmup_trace) = warm_up(items, nav);
    if let Some(e) = &warmup.error {
        tracing::warn!(error = %e, "warmup failed; items will retry on their own");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(options.parallelism).build();
    let results: Vec<(ItemResult, TraceRecord)> = match pool {
        Ok(pool) => pool.install(|| items.par_iter().map(|i| run_item(i, nav)).collect()),
        Err(e) => {
            tracing::warn!(error = %e, "thread pool unavailable; running items sequentially");
            items.iter().map(|i| run_item(i, nav)).collect()
        }
    };
    let (rows, mut traces): (Vec<ItemResult>, Vec<TraceRecord>) = results.into_iter().unzip();
    traces.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    traces.push(warmup_trace);
    let mut header = ReportHeader::new(
        options.dataset.clone(),
        nav.config().clone(),
        nav.gateway().backend_id(),
        nav.embedder().id(),
    );
    header.dropped_gold_sql_timeouts = options.dropped_gold_sql_timeouts.clone();
    BenchmarkRun { report: RunReport::new(header, warmup, rows), traces }
}
