use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::{Connection, OpenFlags};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("database `{id}` is unreachable at {path}: {reason}")]
    Unreachable { id: String, path: PathBuf, reason: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const POOL_MAX_IDLE: usize = 8;

/// A single-file SQLite database opened read-only.
///
/// Connections are pooled; every connection is opened with
/// `SQLITE_OPEN_READ_ONLY`, so even a statement that slipped past the
/// guard could not modify the file.
pub struct Database {
    id: String,
    path: PathBuf,
    idle: Mutex<Vec<Connection>>,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database").field("id", &self.id).field("path", &self.path).finish()
    }
}

pub struct PooledConnection<'a> {
    db: &'a Database,
    conn: Option<Connection>,
}

impl Deref for PooledConnection<'_> {
    type Target = Connection;

    fn deref(&self) -> &Connection {
        self.conn.as_ref().expect("connection present until drop")
    }
}

impl Drop for PooledConnection<'_> {
    fn drop(&mut self) {
        if let Some(conn) = self.conn.take() {
            let mut idle = self.db.idle.lock().expect("pool lock poisoned");
            if idle.len() < POOL_MAX_IDLE {
                idle.push(conn);
            }
        }
    }
}

impl Database {
    pub fn open(id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, DbError> {
        let id = id.into();
        let path = path.as_ref().to_path_buf();
        if !path.is_file() {
            return Err(DbError::Unreachable { id, path, reason: "no such file".into() });
        }
        let db = Self { id, path, idle: Mutex::new(Vec::new()) };
        {
            let conn = db.connection()?;
            conn.query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0))
                .map_err(|e| DbError::Unreachable { id: db.id.clone(), path: db.path.clone(), reason: e.to_string() })?;
        }
        Ok(db)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn connection(&self) -> Result<PooledConnection<'_>, DbError> {
        let pooled = self.idle.lock().expect("pool lock poisoned").pop();
        let conn = match pooled {
            Some(c) => c,
            None => Connection::open_with_flags(
                &self.path,
                OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
            )
            .map_err(|e| DbError::Unreachable { id: self.id.clone(), path: self.path.clone(), reason: e.to_string() })?,
        };
        Ok(PooledConnection { db: self, conn: Some(conn) })
    }

    /// SHA-256 of the database file bytes.
    pub fn content_hash(&self) -> Result<String, DbError> {
        Ok(text::sha256_hex(&std::fs::read(&self.path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_file_is_unreachable() {
        let err = Database::open("x", "/definitely/not/here.db").unwrap_err();
        assert!(matches!(err, DbError::Unreachable { .. }));
    }

    #[test]
    fn connections_are_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.db");
        Connection::open(&path).unwrap().execute_batch("CREATE TABLE t(a INTEGER);").unwrap();
        let db = Database::open("t", &path).unwrap();
        let conn = db.connection().unwrap();
        assert!(conn.execute("INSERT INTO t VALUES (1)", []).is_err());
    }
}
