use std::collections::HashSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::metrics::GoldAnswer;
use crate::model::{DatasetProfile, Modality, NoteFilters, Question, QuestionCategory};
use crate::structured::pipeline::scope_params;
use crate::structured::{execute_sql, Database, ExecError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub question: Question,
    pub gold_answer: GoldAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    pub modality: Modality,
    pub dataset_profile: DatasetProfile,
}

impl BenchmarkItem {
    pub fn id(&self) -> &str {
        &self.question.id
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    /// `row` is 1-based: the line of a JSONL file, the element of a JSON
    /// array, or the data record of a CSV file.
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("{0}")]
    Format(String),
}

fn row_err(row: usize, message: impl Into<String>) -> LoadError {
    LoadError::Row { row, message: message.into() }
}

pub fn load_dataset(path: impl AsRef<Path>, profile: DatasetProfile) -> Result<Vec<BenchmarkItem>, LoadError> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    parse_dataset(&source, profile)
}

/// Parses a benchmark file in the shape `profile` publishes:
///
/// - `fixture` / `omop`: JSON lines with `id`, `question`, `patient_id`,
///   `admission_id`, `category`, `modality`, `gold_answer`, `gold_sql`.
/// - `ehrsql`: a JSON array (or JSON lines) with `id`, `question`,
///   `query`, `answer`.
/// - `drugehrqa`: CSV with `Question`, `SQL Query`, `Answer`,
///   `Patient ID` columns.
/// - `ehrnoteqa`: JSON lines with `choice_A`..`choice_E` and an `answer`
///   letter; the keyed choice text becomes the gold.
///
/// Malformed rows fail the whole load with the row number; nothing is
/// skipped.
pub fn parse_dataset(source: &str, profile: DatasetProfile) -> Result<Vec<BenchmarkItem>, LoadError> {
    let items = match profile {
        DatasetProfile::Drugehrqa => parse_drugehrqa(source)?,
        _ => json_records(source)?
            .into_iter()
            .map(|(row, obj)| item_from_json(row, &obj, profile))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let mut seen = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        if !seen.insert(item.id().to_owned()) {
            return Err(row_err(i + 1, format!("duplicate id {:?}", item.id())));
        }
    }
    Ok(items)
}

fn json_records(source: &str) -> Result<Vec<(usize, Map<String, Value>)>, LoadError> {
    let as_object = |row: usize, v: Value| match v {
        Value::Object(m) => Ok((row, m)),
        other => Err(row_err(row, format!("expected an object, found {other}"))),
    };
    if source.trim_start().starts_with('[') {
        let values: Vec<Value> = serde_json::from_str(source).map_err(|e| LoadError::Format(format!("JSON array: {e}")))?;
        return values.into_iter().enumerate().map(|(i, v)| as_object(i + 1, v)).collect();
    }
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: Value = serde_json::from_str(line).map_err(|e| row_err(i + 1, e.to_string()))?;
            as_object(i + 1, v)
        })
        .collect()
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn field(obj: &Map<String, Value>, names: &[&str]) -> Option<String> {
    names.iter().find_map(|n| obj.get(*n).and_then(scalar)).filter(|s| !s.trim().is_empty())
}

fn gold_from(row: usize, v: Option<&Value>) -> Result<GoldAnswer, LoadError> {
    let gold = match v {
        None | Some(Value::Null) => return Err(row_err(row, "missing gold answer")),
        Some(Value::Array(values)) => GoldAnswer::Set(
            values.iter().map(|x| scalar(x).ok_or_else(|| row_err(row, "gold set members must be scalars"))).collect::<Result<_, _>>()?,
        ),
        Some(other) => GoldAnswer::Text(scalar(other).ok_or_else(|| row_err(row, "gold answer must be text, a number or a list"))?),
    };
    if gold.is_empty() {
        return Err(row_err(row, "missing gold answer"));
    }
    Ok(gold)
}

fn keyed_choice(row: usize, obj: &Map<String, Value>) -> Result<GoldAnswer, LoadError> {
    let key = field(obj, &["answer", "answer_key"]).ok_or_else(|| row_err(row, "missing answer key"))?;
    let letter = key.trim().trim_start_matches("choice_").trim_end_matches([')', '.']).to_ascii_uppercase();
    let choice = obj
        .get(&format!("choice_{letter}"))
        .and_then(scalar)
        .or_else(|| obj.get("choices").and_then(|c| c.get(&letter)).and_then(scalar))
        .or_else(|| {
            let idx = letter.bytes().next().filter(u8::is_ascii_uppercase).map(|b| (b - b'A') as usize)?;
            obj.get("choices").and_then(|c| c.get(idx)).and_then(scalar)
        })
        .ok_or_else(|| row_err(row, format!("answer key {key:?} names no choice")))?;
    gold_from(row, Some(&Value::String(choice)))
}

fn item_from_json(row: usize, obj: &Map<String, Value>, profile: DatasetProfile) -> Result<BenchmarkItem, LoadError> {
    let id = field(obj, &["id", "qid", "question_id"]).unwrap_or_else(|| format!("{}-{row:04}", profile.as_str()));
    let text = field(obj, &["question", "text"]).ok_or_else(|| row_err(row, "missing question text"))?;
    let mut question = Question::new(id, text).map_err(|e| row_err(row, e.to_string()))?;
    question.patient_scope = field(obj, &["patient_id", "patient_scope", "subject_id"]);
    question.admission_scope = field(obj, &["admission_id", "admission_scope", "hadm_id"]);
    if let Some(cat) = obj.get("category").filter(|_| profile != DatasetProfile::Ehrnoteqa) {
        let parsed: QuestionCategory =
            serde_json::from_value(cat.clone()).map_err(|e| row_err(row, format!("category: {e}")))?;
        question.category = Some(parsed);
    }
    if let Some(f) = obj.get("filters") {
        question.filters =
            serde_json::from_value::<NoteFilters>(f.clone()).map_err(|e| row_err(row, format!("filters: {e}")))?;
    }
    let gold_answer = if profile == DatasetProfile::Ehrnoteqa {
        keyed_choice(row, obj)?
    } else {
        gold_from(row, obj.get("gold_answer").or_else(|| obj.get("answer")))?
    };
    let modality = match obj.get("modality") {
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| row_err(row, format!("modality: {e}")))?,
        None => profile.default_modality(),
    };
    Ok(BenchmarkItem {
        question,
        gold_answer,
        gold_sql: field(obj, &["gold_sql", "query", "sql"]),
        modality,
        dataset_profile: profile,
    })
}

fn parse_drugehrqa(source: &str) -> Result<Vec<BenchmarkItem>, LoadError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source.as_bytes());
    let headers = reader.headers().map_err(|e| LoadError::Format(format!("CSV header: {e}")))?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)));
    let q_col = col(&["Question"]).ok_or_else(|| LoadError::Format("CSV has no Question column".into()))?;
    let a_col = col(&["Answer"]).ok_or_else(|| LoadError::Format("CSV has no Answer column".into()))?;
    let sql_col = col(&["SQL Query", "SQL"]);
    let p_col = col(&["Patient ID", "patient_id", "subject_id"]);
    let id_col = col(&["id", "ID"]);
    let mut items = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| row_err(row, e.to_string()))?;
        let get = |c: Option<usize>| c.and_then(|c| record.get(c)).map(str::to_owned).filter(|s| !s.is_empty());
        let id = get(id_col).unwrap_or_else(|| format!("drugehrqa-{row:04}"));
        let text = get(Some(q_col)).ok_or_else(|| row_err(row, "missing question text"))?;
        let mut question = Question::new(id, text).map_err(|e| row_err(row, e.to_string()))?;
        question.patient_scope = get(p_col);
        let gold = get(Some(a_col)).ok_or_else(|| row_err(row, "missing gold answer"))?;
        items.push(BenchmarkItem {
            question,
            gold_answer: GoldAnswer::Text(gold),
            gold_sql: get(sql_col),
            modality: DatasetProfile::Drugehrqa.default_modality(),
            dataset_profile: DatasetProfile::Drugehrqa,
        });
    }
    Ok(items)
}

/// Items whose gold SQL ran past the limit, and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldSqlFilter {
    pub kept: Vec<BenchmarkItem>,
    pub dropped: Vec<String>,
}

/// Pre-executes every gold query against `db` and drops the items whose
/// query times out. Other execution errors keep the item. The dropped
/// count is logged.
pub fn drop_gold_sql_timeouts(items: Vec<BenchmarkItem>, db: &Database, timeout: Duration) -> GoldSqlFilter {
    let mut kept = Vec::with_capacity(items.len());
    let mut dropped = Vec::new();
    for item in items {
        let timed_out = item.gold_sql.as_deref().is_some_and(|sql| {
            matches!(execute_sql(db, sql, &scope_params(&item.question), timeout), Err(ExecError::Timeout { .. }))
        });
        if timed_out {
            dropped.push(item.id().to_owned());
        } else {
            kept.push(item);
        }
    }
    tracing::info!(dropped = dropped.len(), kept = kept.len(), "dropped items whose gold SQL timed out");
    GoldSqlFilter { kept, dropped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn fixture_benchmark_loads() {
        let items = parse_dataset(fixtures::BENCHMARK_JSONL, DatasetProfile::Fixture).unwrap();
        assert_eq!(items.len(), 20);
        assert!(items.iter().all(|i| i.modality == Modality::Multimodal && i.gold_sql.is_some()));
        let q06 = items.iter().find(|i| i.id() == "q06").unwrap();
        assert!(matches!(q06.gold_answer, GoldAnswer::Set(_)));
    }

    #[test]
    fn ehrnoteqa_keyed_choice_becomes_gold() {
        let items = parse_dataset(fixtures::EHRNOTEQA_JSONL, DatasetProfile::Ehrnoteqa).unwrap();
        assert_eq!(items[0].gold_answer, GoldAnswer::Text("furosemide 40 mg daily".into()));
        assert_eq!(items[1].gold_answer, GoldAnswer::Text("ciprofloxacin 500 mg PO".into()));
        assert!(items.iter().all(|i| i.modality == Modality::Unstructured && i.question.category.is_none()));
    }

    #[test]
    fn choices_object_and_list() {
        let src = r#"{"id":"a","question":"q?","choices":{"A":"x","B":"y"},"answer":"B"}
{"id":"b","question":"q?","choices":["x","y","z"],"answer":"C"}"#;
        let items = parse_dataset(src, DatasetProfile::Ehrnoteqa).unwrap();
        assert_eq!(items[0].gold_answer, GoldAnswer::Text("y".into()));
        assert_eq!(items[1].gold_answer, GoldAnswer::Text("z".into()));
    }

    #[test]
    fn ehrsql_and_drugehrqa_shapes() {
        let items = parse_dataset(fixtures::EHRSQL_JSON, DatasetProfile::Ehrsql).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].gold_sql.as_deref(), Some("SELECT count(*) FROM prescriptions WHERE subject_id = 10006"));
        assert_eq!(items[0].modality, Modality::Structured);
        let items = parse_dataset(fixtures::DRUGEHRQA_CSV, DatasetProfile::Drugehrqa).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].gold_answer, GoldAnswer::Text("550 mg".into()));
        assert_eq!(items[1].question.patient_scope.as_deref(), Some("10011"));
        assert_eq!(items[0].id(), "drugehrqa-0001");
    }

    #[test]
    fn missing_gold_names_the_row() {
        let src = "{\"id\":\"a\",\"question\":\"q?\",\"gold_answer\":\"x\"}\n{\"id\":\"b\",\"question\":\"q?\"}\n";
        let err = parse_dataset(src, DatasetProfile::Fixture).unwrap_err();
        assert!(matches!(err, LoadError::Row { row: 2, .. }), "{err}");
        let err = parse_dataset("Question,Answer\nwhat?,\n", DatasetProfile::Drugehrqa).unwrap_err();
        assert!(matches!(err, LoadError::Row { row: 1, .. }), "{err}");
        let err = parse_dataset("{\"id\":\"a\",\"question\":\"q?\",\"choice_A\":\"x\",\"answer\":\"D\"}", DatasetProfile::Ehrnoteqa)
            .unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn malformed_and_duplicate_rows_fail() {
        let err = parse_dataset("{\"id\":\"a\",\"question\":\"q?\",\"gold_answer\":\"x\"}\nnot json\n", DatasetProfile::Fixture).unwrap_err();
        assert!(matches!(err, LoadError::Row { row: 2, .. }));
        let dup = "{\"id\":\"a\",\"question\":\"q?\",\"gold_answer\":\"x\"}\n{\"id\":\"a\",\"question\":\"r?\",\"gold_answer\":\"y\"}\n";
        assert!(matches!(parse_dataset(dup, DatasetProfile::Fixture), Err(LoadError::Row { row: 2, .. })));
        let empty_q = "{\"id\":\"a\",\"question\":\"   \",\"gold_answer\":\"x\"}";
        assert!(matches!(parse_dataset(empty_q, DatasetProfile::Fixture), Err(LoadError::Row { row: 1, .. })));
    }
}
