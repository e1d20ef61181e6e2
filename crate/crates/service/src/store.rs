//! Append-only trace log with an in-memory index by trace id.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use ehrnav_core::TraceRecord;

fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    let mut f = File::open(path)?;
    if f.metadata()?.len() == 0 {
        return Ok(true);
    }
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    Ok(last[0] == b'\n')
}

#[derive(Default)]
pub struct TraceStore {
    path: Option<PathBuf>,
    file: Mutex<Option<File>>,
    index: RwLock<HashMap<String, Arc<TraceRecord>>>,
}

impl TraceStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) the log at `path` and indexes the traces
    /// already in it. A torn last line from an interrupted write is skipped.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_owned();
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<TraceRecord>(&line) {
                    Ok(t) => {
                        index.insert(t.trace_id.clone(), Arc::new(t));
                    }
                    Err(e) => tracing::warn!(path = %path.display(), line = n + 1, error = %e, "skipping unreadable trace"),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if !ends_with_newline(&path)? {
            file.write_all(b"\n")?;
        }
        Ok(Self { path: Some(path), file: Mutex::new(Some(file)), index: RwLock::new(index) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Writes one JSON line and indexes the record. Appends are serialized,
    /// so lines never interleave.
    pub fn append(&self, record: TraceRecord) -> std::io::Result<()> {
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(f) = file.as_mut() {
            let mut line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.index.write().unwrap_or_else(|e| e.into_inner()).insert(record.trace_id.clone(), Arc::new(record));
        Ok(())
    }

    pub fn get(&self, trace_id: &str) -> Option<Arc<TraceRecord>> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).get(trace_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
