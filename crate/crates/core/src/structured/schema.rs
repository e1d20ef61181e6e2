use rusqlite::OptionalExtension;
use serde::{Deserialize, Serialize};

use super::db::{Database, DbError};
use super::executor::from_value_ref;
use crate::model::{Column, ForeignKey, SqlValue, TableRef, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub db_id: String,
    pub tables: Vec<TableRef>,
    pub discovered_at: Timestamp,
}

impl SchemaCatalog {
    pub fn table(&self, name: &str) -> Option<&TableRef> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSample {
    pub table: String,
    pub columns: Vec<String>,
    pub sample_row: Option<Vec<SqlValue>>,
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn primary_keys_of(conn: &rusqlite::Connection, table: &str) -> Result<Vec<String>, DbError> {
    let mut stmt = conn.prepare("SELECT name FROM pragma_table_info(?1) WHERE pk > 0 ORDER BY pk")?;
    let pks = stmt.query_map([table], |r| r.get(0))?.collect::<Result<Vec<String>, _>>()?;
    Ok(pks)
}

/// Reads tables, columns and keys from SQLite's own metadata. Tables are
/// ordered by name; internal `sqlite_*` tables are skipped.
pub fn discover_schema(db: &Database) -> Result<SchemaCatalog, DbError> {
    let conn = db.connection()?;
    let names: Vec<String> = conn
        .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")?
        .query_map([], |r| r.get(0))?
        .collect::<Result<_, _>>()?;
    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let columns = conn
            .prepare("SELECT name, type FROM pragma_table_info(?1) ORDER BY cid")?
            .query_map([&name], |r| Ok(Column { name: r.get(0)?, data_type: r.get(1)? }))?
            .collect::<Result<Vec<_>, _>>()?;
        let primary_keys = primary_keys_of(&conn, &name)?;
        let raw_fks = conn
            .prepare(r#"SELECT "from", "table", "to", seq FROM pragma_foreign_key_list(?1) ORDER BY id, seq"#)?
            .query_map([&name], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, Option<String>>(2)?, r.get::<_, usize>(3)?))
            })?
            .collect::<Result<Vec<_>, _>>()?;
        let mut foreign_keys = Vec::with_capacity(raw_fks.len());
        for (column, ref_table, to, seq) in raw_fks {
            // a missing target column means "the referenced table's primary key"
            let ref_column = match to {
                Some(c) => c,
                None => primary_keys_of(&conn, &ref_table)?.get(seq).cloned().unwrap_or_default(),
            };
            foreign_keys.push(ForeignKey { column, ref_table, ref_column });
        }
        tables.push(TableRef { name, columns, primary_keys, foreign_keys });
    }
    Ok(SchemaCatalog { db_id: db.id().to_owned(), tables, discovered_at: Timestamp::now() })
}

/// Column names plus the first row in primary-key order (rowid order when
/// the table declares no primary key).
pub fn sample_table(db: &Database, table: &str) -> Result<TableSample, DbError> {
    let conn = db.connection()?;
    let exists: Option<String> = conn
        .query_row(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name = ?1",
            [table],
            |r| r.get(0),
        )
        .optional()?;
    if exists.is_none() {
        return Err(DbError::UnknownTable(table.to_owned()));
    }
    let pks = primary_keys_of(&conn, table)?;
    let order = if pks.is_empty() {
        "rowid".to_owned()
    } else {
        pks.iter().map(|c| quote_ident(c)).collect::<Vec<_>>().join(", ")
    };
    let sql = format!("SELECT * FROM {} ORDER BY {order} LIMIT 1", quote_ident(table));
    let mut stmt = conn.prepare(&sql)?;
    let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_owned).collect();
    let width = columns.len();
    let sample_row = stmt
        .query_row([], |row| (0..width).map(|i| row.get_ref(i).map(from_value_ref)).collect::<Result<Vec<_>, _>>())
        .optional()?;
    Ok(TableSample { table: table.to_owned(), columns, sample_row })
}
