//! Lexical read-only guard applied before any statement reaches SQLite.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectKind {
    /// Nothing but whitespace and comments.
    Empty,
    MultiStatement,
    /// DDL, DML, PRAGMA, ATTACH, transaction control and the like.
    NotReadOnly,
    /// Unterminated string, identifier or comment.
    Malformed,
}

/// Keywords that may start an accepted statement.
const READ_KEYWORDS: [&str; 3] = ["SELECT", "WITH", "VALUES"];

/// Keywords rejected outright as statement openers.
const WRITE_KEYWORDS: [&str; 21] = [
    "INSERT", "UPDATE", "DELETE", "REPLACE", "UPSERT", "CREATE", "DROP", "ALTER", "ATTACH", "DETACH", "PRAGMA",
    "VACUUM", "REINDEX", "ANALYZE", "BEGIN", "COMMIT", "END", "ROLLBACK", "SAVEPOINT", "RELEASE", "EXPLAIN",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    start: usize,
    end: usize,
    has_content: bool,
}

fn segments(sql: &str) -> Result<Vec<Segment>, RejectKind> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut seg = Segment { start: 0, end: 0, has_content: false };
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'\'' | b'"' | b'`' | b'[' => {
                let close = if b == b'[' { b']' } else { b };
                seg.has_content = true;
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => return Err(RejectKind::Malformed),
                        Some(&c) if c == close => {
                            // doubled quote is an escaped quote
                            if close != b']' && bytes.get(i + 1) == Some(&close) {
                                i += 2;
                                continue;
                            }
                            i += 1;
                            break;
                        }
                        Some(_) => i += 1,
                    }
                }
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                let rest = &sql[i + 2..];
                match rest.find("*/") {
                    Some(off) => i += 2 + off + 2,
                    None => return Err(RejectKind::Malformed),
                }
            }
            b';' => {
                seg.end = i;
                out.push(seg);
                i += 1;
                seg = Segment { start: i, end: i, has_content: false };
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                seg.has_content = true;
                i += 1;
            }
        }
    }
    seg.end = bytes.len();
    out.push(seg);
    Ok(out.into_iter().filter(|s| s.has_content).collect())
}

/// Splits `sql` at top-level semicolons, ignoring semicolons inside strings,
/// quoted identifiers and comments. Segments holding only whitespace and
/// comments are dropped.
pub fn split_statements(sql: &str) -> Result<Vec<&str>, RejectKind> {
    Ok(segments(sql)?.into_iter().map(|s| sql[s.start..s.end].trim()).collect())
}

/// First keyword of a statement, skipping leading comments.
fn leading_keyword(stmt: &str) -> Option<String> {
    let mut rest = stmt;
    loop {
        rest = rest.trim_start();
        if let Some(r) = rest.strip_prefix("--") {
            rest = r.split_once('\n').map_or("", |(_, tail)| tail);
        } else if let Some(r) = rest.strip_prefix("/*") {
            rest = r.split_once("*/").map_or("", |(_, tail)| tail);
        } else {
            break;
        }
    }
    let word: String = rest.chars().take_while(|c| c.is_ascii_alphabetic() || *c == '_').collect();
    (!word.is_empty()).then(|| word.to_ascii_uppercase())
}

/// Accepts exactly one statement that does not open with a write or
/// administrative keyword, and returns it without the trailing semicolon.
///
/// Statements opening with an unrecognized word are passed through so that
/// SQLite reports the syntax error; the executor additionally checks
/// `sqlite3_stmt_readonly` after preparing.
pub fn check_read_only(sql: &str) -> Result<&str, RejectKind> {
    let stmts = split_statements(sql)?;
    let stmt = match stmts.as_slice() {
        [] => return Err(RejectKind::Empty),
        [one] => *one,
        _ => return Err(RejectKind::MultiStatement),
    };
    match leading_keyword(stmt) {
        Some(kw) if READ_KEYWORDS.contains(&kw.as_str()) => Ok(stmt),
        Some(kw) if WRITE_KEYWORDS.contains(&kw.as_str()) => Err(RejectKind::NotReadOnly),
        _ => Ok(stmt),
    }
}
