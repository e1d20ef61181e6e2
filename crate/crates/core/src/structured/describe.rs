use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed, EmbedError, Embedder, Vector};
use crate::llm::{Gateway, LlmError, RoleTag};
use crate::model::{self, fingerprint_schema, JsonlError, TableDescription, TableRef};
use crate::trace::TraceRecorder;

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("table reviewer returned an empty description for `{0}`")]
    EmptyDescription(String),
    #[error("description cache: {0}")]
    Store(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    db_id: String,
    table: String,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    db_id: String,
    table: String,
    schema_fingerprint: String,
    description: String,
}

/// Table descriptions keyed by `(db id, table name, schema fingerprint)`,
/// optionally backed by an append-only JSONL file. Description embeddings
/// are memoized alongside, keyed by embedder id.
#[derive(Default)]
pub struct DescriptionCache {
    entries: RwLock<HashMap<CacheKey, TableDescription>>,
    vectors: RwLock<HashMap<(String, CacheKey), Vector>>,
    fill: Mutex<()>,
    path: Option<PathBuf>,
}

impl DescriptionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a file-backed cache.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JsonlError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let lines: Vec<CacheLine> = model::read_jsonl(BufReader::new(std::fs::File::open(&path)?))?;
            for l in lines {
                let key = CacheKey { db_id: l.db_id, table: l.table.clone(), fingerprint: l.schema_fingerprint.clone() };
                entries.insert(
                    key,
                    TableDescription { table: l.table, description: l.description, schema_fingerprint: l.schema_fingerprint },
                );
            }
        }
        Ok(Self { entries: RwLock::new(entries), path: Some(path), ..Self::default() })
    }

    /// Cached description for `table`, only if it was generated for the
    /// table's current structure.
    pub fn get(&self, db_id: &str, table: &TableRef) -> Option<TableDescription> {
        let key = CacheKey { db_id: db_id.to_owned(), table: table.name.clone(), fingerprint: fingerprint_schema(table) };
        self.entries.read().expect("cache lock poisoned").get(&key).cloned()
    }

    pub fn insert(&self, db_id: &str, description: TableDescription) -> Result<(), JsonlError> {
        let key = CacheKey {
            db_id: db_id.to_owned(),
            table: description.table.clone(),
            fingerprint: description.schema_fingerprint.clone(),
        };
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            model::append_jsonl(
                &mut file,
                &CacheLine {
                    db_id: db_id.to_owned(),
                    table: description.table.clone(),
                    schema_fingerprint: description.schema_fingerprint.clone(),
                    description: description.description.clone(),
                },
            )?;
        }
        self.entries.write().expect("cache lock poisoned").insert(key, description);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding of `"name: description"`, computed once per embedder.
    pub fn description_vector(&self, db_id: &str, desc: &TableDescription, embedder: &dyn Embedder) -> Result<Vector, EmbedError> {
        let key = (
            embedder.id(),
            CacheKey { db_id: db_id.to_owned(), table: desc.table.clone(), fingerprint: desc.schema_fingerprint.clone() },
        );
        if let Some(v) = self.vectors.read().expect("cache lock poisoned").get(&key) {
            return Ok(v.clone());
        }
        let v = embed(embedder, &super::select::description_text(desc))?;
        self.vectors.write().expect("cache lock poisoned").insert(key, v.clone());
        Ok(v)
    }
}

fn render_columns(table: &TableRef) -> String {
    table
        .columns
        .iter()
        .map(|c| if c.data_type.is_empty() { format!("- {}", c.name) } else { format!("- {} ({})", c.name, c.data_type) })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_list(items: Vec<String>) -> String {
    if items.is_empty() {
        "None".to_owned()
    } else {
        items.join(", ")
    }
}

/// Returns the cached description when the table is unchanged; otherwise
/// asks the table reviewer and caches the reply.
pub fn describe_table(
    table: &TableRef,
    db_id: &str,
    gateway: &Gateway,
    cache: &DescriptionCache,
    trace: &TraceRecorder,
) -> Result<TableDescription, DescribeError> {
    if let Some(hit) = cache.get(db_id, table) {
        return Ok(hit);
    }
    let _fill = cache.fill.lock().expect("cache fill lock poisoned");
    if let Some(hit) = cache.get(db_id, table) {
        return Ok(hit);
    }
    let bindings: BTreeMap<&str, String> = BTreeMap::from([
        ("table_name", table.name.clone()),
        ("columns", render_columns(table)),
        ("primary_keys", render_list(table.primary_keys.clone())),
        (
            "foreign_keys",
            render_list(
                table
                    .foreign_keys
                    .iter()
                    .map(|fk| format!("{} -> {}.{}", fk.column, fk.ref_table, fk.ref_column))
                    .collect(),
            ),
        ),
    ]);
    let prompt = gateway.prompts().table_description.render(&bindings)?;
    let reply = gateway.complete(&gateway.request(RoleTag::TableReviewer, prompt), trace)?;
    let text = reply.text.trim();
    let text = text.strip_prefix("Description:").unwrap_or(text).trim();
    if text.is_empty() {
        return Err(DescribeError::EmptyDescription(table.name.clone()));
    }
    let description = TableDescription {
        table: table.name.clone(),
        description: text.to_owned(),
        schema_fingerprint: fingerprint_schema(table),
    };
    cache.insert(db_id, description.clone())?;
    Ok(description)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptRule, ScriptedBackend};
    use crate::model::Column;
    use crate::trace::VirtualClock;
    use std::sync::Arc;

    fn table(name: &str, cols: &[&str]) -> TableRef {
        TableRef {
            name: name.into(),
            columns: cols.iter().map(|c| Column { name: c.to_string(), data_type: "TEXT".into() }).collect(),
            primary_keys: vec![cols[0].to_string()],
            foreign_keys: vec![],
        }
    }

    fn gateway(reply: &str) -> Gateway {
        Gateway::with_defaults(Arc::new(ScriptedBackend::new(
            vec![ScriptRule {
                role_tag: RoleTag::TableReviewer,
                substring_pattern: "Table Name:".into(),
                reply_text: reply.into(),
                latency_ms: 1,
                tokens: None,
            }],
            0.0,
        )))
    }

    fn trace() -> TraceRecorder {
        TraceRecorder::new("q", Arc::new(VirtualClock::new()))
    }

    #[test]
    fn second_call_is_a_cache_hit() {
        let gw = gateway("Description: Medication orders.");
        let cache = DescriptionCache::in_memory();
        let t = table("prescriptions", &["row_id", "drug"]);
        let a = describe_table(&t, "db", &gw, &cache, &trace()).unwrap();
        assert_eq!(a.description, "Medication orders.");
        let b = describe_table(&t, "db", &gw, &cache, &trace()).unwrap();
        assert_eq!(a, b);
        assert_eq!(gw.call_count(RoleTag::TableReviewer), 1);
    }

    #[test]
    fn altered_table_is_described_again() {
        let gw = gateway("Medication orders.");
        let cache = DescriptionCache::in_memory();
        describe_table(&table("prescriptions", &["row_id", "drug"]), "db", &gw, &cache, &trace()).unwrap();
        describe_table(&table("prescriptions", &["row_id", "drug", "route"]), "db", &gw, &cache, &trace()).unwrap();
        assert_eq!(gw.call_count(RoleTag::TableReviewer), 2);
    }

    #[test]
    fn empty_reply_is_an_error() {
        let gw = gateway("  Description:  ");
        let err = describe_table(&table("t", &["a"]), "db", &gw, &DescriptionCache::in_memory(), &trace()).unwrap_err();
        assert!(matches!(err, DescribeError::EmptyDescription(t) if t == "t"));
    }

    #[test]
    fn file_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("descriptions.jsonl");
        let gw = gateway("Lab results.");
        let t = table("labevents", &["row_id", "value"]);
        {
            let cache = DescriptionCache::open(&path).unwrap();
            describe_table(&t, "db", &gw, &cache, &trace()).unwrap();
        }
        let cache = DescriptionCache::open(&path).unwrap();
        assert_eq!(cache.get("db", &t).unwrap().description, "Lab results.");
        assert!(cache.get("other-db", &t).is_none());
        describe_table(&t, "db", &gw, &cache, &trace()).unwrap();
        assert_eq!(gw.call_count(RoleTag::TableReviewer), 1);
    }
}
