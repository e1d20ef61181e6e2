use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{spread, GoldAnswer, RougeScore, Spread, QUARTILE_CONVENTION};
use crate::model::{DatasetProfile, Modality, QuestionCategory};
use crate::navigator::PipelineConfig;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// How a profile's answers are judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryMetric {
    ExactMatch,
    RougeL,
    /// Chart-review verdicts imported after the run; exact match stands in
    /// until then.
    HumanVerdict,
}

impl PrimaryMetric {
    pub fn for_profile(profile: DatasetProfile) -> Self {
        match profile {
            DatasetProfile::Ehrnoteqa => Self::RougeL,
            DatasetProfile::Omop => Self::HumanVerdict,
            DatasetProfile::Fixture | DatasetProfile::Ehrsql | DatasetProfile::Drugehrqa => Self::ExactMatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<QuestionCategory>,
    pub modality: Modality,
    pub prediction: String,
    pub gold: GoldAnswer,
    pub exact_match: u8,
    pub rouge_l: RougeScore,
    /// Exact match, overridden by an imported verdict when there is one.
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ItemError>,
    pub sql_attempts: u32,
    /// `None` when the structured arm did not run.
    pub structured_ok: Option<bool>,
    /// `None` when the notes arm did not run.
    pub fallback_mode: Option<bool>,
    pub note_chunks: usize,
    pub insufficient_evidence: bool,
    /// Whether the executed SQL returned the same rows as the gold SQL.
    pub execution_match: Option<bool>,
    pub latency_ms: u64,
    pub llm_calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub trace_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub items: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub latency_ms: Option<Spread>,
    pub cost: Option<Spread>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub items: usize,
    pub correct: usize,
    pub errors: usize,
    pub accuracy: f64,
    pub exact_match_mean: f64,
    pub rouge_l_f1_mean: f64,
    pub rouge_l_f1_median: f64,
    pub latency_ms: Option<Spread>,
    pub total_cost: f64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub by_modality: BTreeMap<String, GroupStats>,
    pub by_category: BTreeMap<String, GroupStats>,
    /// Reserved for scores merged in by external scorers.
    pub bertscore: Option<f64>,
    pub bartscore: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn group_stats(rows: &[&ItemResult]) -> GroupStats {
    let correct = rows.iter().filter(|r| r.correct).count();
    let latencies: Vec<f64> = rows.iter().map(|r| r.latency_ms as f64).collect();
    let costs: Vec<f64> = rows.iter().map(|r| r.cost).collect();
    GroupStats {
        items: rows.len(),
        correct,
        accuracy: ratio(correct, rows.len()),
        latency_ms: spread(&latencies),
        cost: spread(&costs),
        total_cost: costs.iter().sum(),
    }
}

impl Aggregates {
    /// Computes every aggregate from the item rows, in row order.
    pub fn compute(items: &[ItemResult]) -> Self {
        let all: Vec<&ItemResult> = items.iter().collect();
        let overall = group_stats(&all);
        let f1: Vec<f64> = items.iter().map(|r| r.rouge_l.f1).collect();
        let em: Vec<f64> = items.iter().map(|r| f64::from(r.exact_match)).collect();
        let mut by_modality: BTreeMap<String, Vec<&ItemResult>> = BTreeMap::new();
        let mut by_category: BTreeMap<String, Vec<&ItemResult>> = BTreeMap::new();
        for r in items {
            let m = serde_json::to_value(r.modality).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            by_modality.entry(m).or_default().push(r);
            let c = r.category.map(|c| c.as_str()).unwrap_or("uncategorized");
            by_category.entry(c.to_owned()).or_default().push(r);
        }
        Self {
            items: items.len(),
            correct: overall.correct,
            errors: items.iter().filter(|r| r.error.is_some()).count(),
            accuracy: overall.accuracy,
            exact_match_mean: mean(&em),
            rouge_l_f1_mean: mean(&f1),
            rouge_l_f1_median: spread(&f1).map(|s| s.median).unwrap_or(0.0),
            latency_ms: overall.latency_ms,
            total_cost: overall.total_cost,
            total_prompt_tokens: items.iter().map(|r| r.prompt_tokens).sum(),
            total_completion_tokens: items.iter().map(|r| r.completion_tokens).sum(),
            by_modality: by_modality.into_iter().map(|(k, v)| (k, group_stats(&v))).collect(),
            by_category: by_category.into_iter().map(|(k, v)| (k, group_stats(&v))).collect(),
            bertscore: None,
            bartscore: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub format_version: u32,
    pub dataset: String,
    pub profile: DatasetProfile,
    pub primary_metric: PrimaryMetric,
    pub llm_backend: String,
    pub embedder: String,
    pub quartile_convention: String,
    /// Items removed before the run because their gold SQL timed out.
    #[serde(default)]
    pub dropped_gold_sql_timeouts: Vec<String>,
    pub config: PipelineConfig,
}

impl ReportHeader {
    pub fn new(dataset: impl Into<String>, config: PipelineConfig, llm_backend: String, embedder: String) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            dataset: dataset.into(),
            profile: config.profile,
            primary_metric: PrimaryMetric::for_profile(config.profile),
            llm_backend,
            embedder,
            quartile_convention: QUARTILE_CONVENTION.to_owned(),
            dropped_gold_sql_timeouts: Vec::new(),
            config,
        }
    }
}

/// Cost of describing tables and indexing notes before the items run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupSummary {
    pub tables_described: usize,
    pub patients_indexed: usize,
    pub llm_calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report aggregates do not match its rows")]
    Inconsistent,
    #[error("serialize: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("verdict line {line}: {message}")]
    Verdict { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub header: ReportHeader,
    pub warmup: WarmupSummary,
    pub items: Vec<ItemResult>,
    pub aggregates: Aggregates,
}

impl RunReport {
    /// Sorts rows by id and computes the aggregates from them.
    pub fn new(header: ReportHeader, warmup: WarmupSummary, mut items: Vec<ItemResult>) -> Self {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        let aggregates = Aggregates::compute(&items);
        Self { header, warmup, items, aggregates }
    }

    /// Recomputes the aggregates from the rows and compares.
    pub fn verify(&self) -> Result<(), ReportError> {
        let sorted = self.items.windows(2).all(|w| w[0].id <= w[1].id);
        if sorted && Aggregates::compute(&self.items) == self.aggregates {
            Ok(())
        } else {
            Err(ReportError::Inconsistent)
        }
    }

    /// Pretty JSON with a trailing newline, after [`RunReport::verify`].
    pub fn to_json(&self) -> Result<String, ReportError> {
        self.verify()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn accuracy_line(&self) -> String {
        let a = &self.aggregates;
        format!("accuracy: {}/{} ({:.1}%)", a.correct, a.items, a.accuracy * 100.0)
    }

    /// Applies chart-review verdicts: JSON lines of `{"id", "verdict"}` with
    /// verdict `correct` or `incorrect`. Returns the number applied.
    pub fn apply_verdicts(&mut self, source: &str) -> Result<usize, ReportError> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            verdict: Verdict,
        }
        let mut applied = 0;
        for (i, line) in source.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Line = serde_json::from_str(line)
                .map_err(|e| ReportError::Verdict { line: i + 1, message: e.to_string() })?;
            let item = self
                .items
                .iter_mut()
                .find(|r| r.id == v.id)
                .ok_or_else(|| ReportError::Verdict { line: i + 1, message: format!("unknown item {:?}", v.id) })?;
            item.verdict = Some(v.verdict);
            item.correct = v.verdict == Verdict::Correct;
            applied += 1;
        }
        self.aggregates = Aggregates::compute(&self.items);
        Ok(applied)
    }

    /// Plain-text table of the rows followed by the aggregates.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<22} {:<12} {:>2} {:>7} {:>3} {:>9} {:>9}  {}",
            "id", "category", "modality", "ok", "rougeL", "try", "ms", "cost", "prediction / error"
        );
        for r in &self.items {
            let category = r.category.map(|c| c.as_str()).unwrap_or("-");
            let modality = serde_json::to_value(r.modality).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            let detail = match &r.error {
                Some(e) => format!("error[{}]: {}", e.class, e.message),
                None => r.prediction.replace('\n', " "),
            };
            let detail: String = detail.chars().take(60).collect();
            let _ = writeln!(
                out,
                "{:<14} {:<22} {:<12} {:>2} {:>7.3} {:>3} {:>9} {:>9.5}  {}",
                r.id,
                category,
                modality,
                if r.correct { "Y" } else { "N" },
                r.rouge_l.f1,
                r.sql_attempts,
                r.latency_ms,
                r.cost,
                detail
            );
        }
        let a = &self.aggregates;
        let _ = writeln!(out);
        let _ = writeln!(out, "{}", self.accuracy_line());
        let _ = writeln!(out, "errors: {}", a.errors);
        let _ = writeln!(out, "rouge-L f1: mean {:.4}, median {:.4}", a.rouge_l_f1_mean, a.rouge_l_f1_median);
        if let Some(l) = a.latency_ms {
            let _ = writeln!(out, "latency ms: median {:.1} (IQR {:.1} to {:.1})", l.median, l.q1, l.q3);
        }
        let _ = writeln!(
            out,
            "cost: {:.5} over {} prompt + {} completion tokens (warmup {:.5})",
            a.total_cost, a.total_prompt_tokens, a.total_completion_tokens, self.warmup.cost
        );
        for (name, g) in a.by_modality.iter().map(|(k, v)| (format!("modality {k}"), v)).chain(
            a.by_category.iter().map(|(k, v)| (format!("category {k}"), v)),
        ) {
            let lat = g.latency_ms.map(|l| format!("{:.1} ms (IQR {:.1} to {:.1})", l.median, l.q1, l.q3)).unwrap_or_default();
            let _ = writeln!(out, "  {name}: {}/{} correct, latency {lat}, cost {:.5}", g.correct, g.items, g.total_cost);
        }
        out
    }
}
