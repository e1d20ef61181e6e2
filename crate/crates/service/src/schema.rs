//! Read-only schema view: discovered catalog plus whatever table
//! descriptions are already cached. Never calls the model.

use ehrnav_core::model::TableRef;
use ehrnav_core::structured::{discover_schema, DbError};
use ehrnav_core::{DatasetProfile, Timestamp};
use serde::{Deserialize, Serialize};

use crate::registry::Registered;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionStatus {
    Cached,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableView {
    #[serde(flatten)]
    pub table: TableRef,
    pub description: Option<String>,
    pub description_status: DescriptionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaView {
    pub db_id: String,
    pub profile: DatasetProfile,
    pub discovered_at: Timestamp,
    pub tables: Vec<TableView>,
}

impl SchemaView {
    pub fn described(&self) -> usize {
        self.tables.iter().filter(|t| t.description_status == DescriptionStatus::Cached).count()
    }
}

pub fn schema_view(entry: &Registered) -> Result<SchemaView, DbError> {
    let nav = &entry.navigator;
    let db = nav.database().expect("registered navigators have a database");
    let catalog = discover_schema(db)?;
    let tables = catalog
        .tables
        .into_iter()
        .map(|t| {
            let cached = nav.descriptions().get(db.id(), &t);
            TableView {
                description_status: if cached.is_some() { DescriptionStatus::Cached } else { DescriptionStatus::Absent },
                description: cached.map(|d| d.description),
                table: t,
            }
        })
        .collect();
    Ok(SchemaView { db_id: catalog.db_id, profile: entry.profile, discovered_at: catalog.discovered_at, tables })
}

/// Plain-text rendering used by `ehrnav describe-schema`.
pub fn render_schema(view: &SchemaView) -> String {
    let mut out = format!("database {} ({}), {} tables\n", view.db_id, view.profile, view.tables.len());
    for t in &view.tables {
        let cols: Vec<String> = t
            .table
            .columns
            .iter()
            .map(|c| {
                if t.table.primary_keys.contains(&c.name) {
                    format!("{}*", c.name)
                } else {
                    c.name.clone()
                }
            })
            .collect();
        out.push_str(&format!("\n{} ({})\n", t.table.name, cols.join(", ")));
        for fk in &t.table.foreign_keys {
            out.push_str(&format!("  {} -> {}.{}\n", fk.column, fk.ref_table, fk.ref_column));
        }
        match &t.description {
            Some(d) => out.push_str(&format!("  {}\n", d.trim())),
            None => out.push_str("  (no cached description)\n"),
        }
    }
    out
}
