use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::chunker::chunk_notes;
use super::corpus::corpus_fingerprint;
use super::ChunkingConfig;
use crate::embedding::{embed, EmbedError, Embedder, Vector, VectorIndex};
use crate::model::{NoteChunk, NoteDocument, Timestamp};
use crate::text;

const INDEX_FORMAT_VERSION: u32 = 1;

/// Chunked and embedded notes of one patient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoteIndex {
    pub patient_scope: String,
    /// Chunks with their embeddings, in document order.
    pub chunks: Vec<NoteChunk>,
    pub built_at: Timestamp,
    pub corpus_fingerprint: String,
    pub embedder_id: String,
    pub config: ChunkingConfig,
    #[serde(skip)]
    vectors: VectorIndex,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

impl NoteIndex {
    /// Chunks and embeds `notes` from scratch.
    pub fn build(
        patient: &str,
        notes: &[NoteDocument],
        config: &ChunkingConfig,
        embedder: &dyn Embedder,
    ) -> Result<Self, EmbedError> {
        let mut chunks = chunk_notes(notes, config);
        for c in &mut chunks {
            c.embedding = Some(embed(embedder, &c.text)?.as_slice().to_vec());
        }
        let mut index = Self {
            patient_scope: patient.to_owned(),
            chunks,
            built_at: Timestamp::now(),
            corpus_fingerprint: corpus_fingerprint(notes),
            embedder_id: embedder.id(),
            config: config.clone(),
            vectors: VectorIndex::new(),
            positions: HashMap::new(),
        };
        index.freeze()?;
        Ok(index)
    }

    /// Rebuilds the vector index from the chunk embeddings.
    fn freeze(&mut self) -> Result<(), EmbedError> {
        let mut vectors = VectorIndex::new();
        let mut positions = HashMap::with_capacity(self.chunks.len());
        for (i, c) in self.chunks.iter().enumerate() {
            let values = c.embedding.clone().ok_or_else(|| EmbedError::Config(format!("chunk {} has no embedding", c.key())))?;
            vectors.insert(c.key(), Vector::new(values)?, text::digest(&c.text))?;
            positions.insert(c.key(), i);
        }
        self.vectors = vectors;
        self.positions = positions;
        Ok(())
    }

    pub fn vectors(&self) -> &VectorIndex {
        &self.vectors
    }

    pub fn chunk(&self, key: &str) -> Option<&NoteChunk> {
        self.positions.get(key).map(|&i| &self.chunks[i])
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    fn is_current(&self, fingerprint: &str, embedder_id: &str, config: &ChunkingConfig) -> bool {
        self.corpus_fingerprint == fingerprint && self.embedder_id == embedder_id && &self.config == config
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    index: NoteIndex,
}

/// Built note indexes, reused while the patient's notes are unchanged.
///
/// Builds for the same patient are single-flight: concurrent callers wait
/// for the first build and then share its result. With a directory
/// configured, indexes are also persisted and reloaded across processes.
#[derive(Default)]
pub struct NoteIndexStore {
    dir: Option<PathBuf>,
    built: RwLock<HashMap<String, Arc<NoteIndex>>>,
    building: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    builds: AtomicU64,
}

impl NoteIndexStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), ..Self::default() })
    }

    /// Number of indexes built (not reused) by this store.
    pub fn builds(&self) -> u64 {
        self.builds.load(Ordering::SeqCst)
    }

    fn file_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(format!("notes-{}.json", text::digest(key)))
    }

    fn load(path: &Path) -> Option<NoteIndex> {
        let raw = std::fs::read(path).ok()?;
        let file: IndexFile = match serde_json::from_slice(&raw) {
            Ok(f) => f,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable note index");
                return None;
            }
        };
        if file.version != INDEX_FORMAT_VERSION {
            return None;
        }
        let mut index = file.index;
        index.freeze().ok()?;
        Some(index)
    }

    fn persist(path: &Path, index: &NoteIndex) {
        let body = IndexFile { version: INDEX_FORMAT_VERSION, index: index.clone() };
        let tmp = path.with_extension("json.tmp");
        let result = serde_json::to_vec(&body)
            .map_err(std::io::Error::other)
            .and_then(|bytes| std::fs::write(&tmp, bytes))
            .and_then(|_| std::fs::rename(&tmp, path));
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "could not persist note index");
        }
    }

    /// Returns the patient's index, building it only when no index exists
    /// for the current notes, embedder and chunking config. The flag is
    /// true when a build happened.
    pub fn get_or_build(
        &self,
        patient: &str,
        notes: &[NoteDocument],
        config: &ChunkingConfig,
        embedder: &dyn Embedder,
    ) -> Result<(Arc<NoteIndex>, bool), EmbedError> {
        let key = format!("{}\u{1f}{patient}", embedder.id());
        let fingerprint = corpus_fingerprint(notes);
        let embedder_id = embedder.id();
        let current = |idx: &NoteIndex| idx.is_current(&fingerprint, &embedder_id, config);
        if let Some(idx) = self.built.read().expect("index store poisoned").get(&key) {
            if current(idx) {
                return Ok((Arc::clone(idx), false));
            }
        }
        let gate = Arc::clone(self.building.lock().expect("index store poisoned").entry(key.clone()).or_default());
        let _guard = gate.lock().expect("index build lock poisoned");
        if let Some(idx) = self.built.read().expect("index store poisoned").get(&key) {
            if current(idx) {
                return Ok((Arc::clone(idx), false));
            }
        }
        let path = self.dir.as_deref().map(|d| Self::file_for(d, &key));
        if let Some(idx) = path.as_deref().and_then(Self::load).filter(|i| current(i)) {
            let idx = Arc::new(idx);
            self.built.write().expect("index store poisoned").insert(key, Arc::clone(&idx));
            return Ok((idx, false));
        }
        let idx = NoteIndex::build(patient, notes, config, embedder)?;
        self.builds.fetch_add(1, Ordering::SeqCst);
        if let Some(p) = &path {
            Self::persist(p, &idx);
        }
        let idx = Arc::new(idx);
        self.built.write().expect("index store poisoned").insert(key, Arc::clone(&idx));
        Ok((idx, true))
    }
}

/// Convenience wrapper over [`NoteIndexStore::get_or_build`].
pub fn build_index(
    patient: &str,
    notes: &[NoteDocument],
    config: &ChunkingConfig,
    embedder: &dyn Embedder,
    store: &NoteIndexStore,
) -> Result<Arc<NoteIndex>, EmbedError> {
    store.get_or_build(patient, notes, config, embedder).map(|(idx, _)| idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{CountingEmbedder, HashEmbedder};

    fn notes() -> Vec<NoteDocument> {
        ["aspirin 81 mg daily", "heparin drip started", "discharged home on aspirin"]
            .iter()
            .enumerate()
            .map(|(i, t)| NoteDocument {
                id: format!("n{i}"),
                patient_scope: "p1".into(),
                timestamp: Timestamp::from_unix(1_000_000 + i as i64 * 3600).unwrap(),
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn second_build_reuses_index() {
        let e = CountingEmbedder::new(HashEmbedder::default());
        let store = NoteIndexStore::in_memory();
        let cfg = ChunkingConfig::default();
        let idx = build_index("p1", &notes(), &cfg, &e, &store).unwrap();
        assert_eq!(idx.len(), 3);
        let calls = e.calls();
        build_index("p1", &notes(), &cfg, &e, &store).unwrap();
        assert_eq!(e.calls(), calls);
        assert_eq!(store.builds(), 1);
    }

    #[test]
    fn edited_note_forces_rebuild() {
        let e = CountingEmbedder::new(HashEmbedder::default());
        let store = NoteIndexStore::in_memory();
        let cfg = ChunkingConfig::default();
        build_index("p1", &notes(), &cfg, &e, &store).unwrap();
        let mut edited = notes();
        edited[1].text.push_str(" overnight");
        let idx = build_index("p1", &edited, &cfg, &e, &store).unwrap();
        assert_eq!(store.builds(), 2);
        assert_eq!(idx.corpus_fingerprint, corpus_fingerprint(&edited));
    }

    #[test]
    fn zero_notes_give_empty_index() {
        let idx = build_index("p0", &[], &ChunkingConfig::default(), &HashEmbedder::default(), &NoteIndexStore::in_memory()).unwrap();
        assert!(idx.is_empty());
        assert!(idx.vectors().is_empty());
    }

    #[test]
    fn persisted_index_is_reloaded_without_embedding() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ChunkingConfig::default();
        {
            let store = NoteIndexStore::persistent(dir.path()).unwrap();
            build_index("p1", &notes(), &cfg, &HashEmbedder::default(), &store).unwrap();
        }
        let e = CountingEmbedder::new(HashEmbedder::default());
        let store = NoteIndexStore::persistent(dir.path()).unwrap();
        let idx = build_index("p1", &notes(), &cfg, &e, &store).unwrap();
        assert_eq!(e.calls(), 0);
        assert_eq!(store.builds(), 0);
        assert_eq!(idx.vectors().len(), 3);
        assert!(idx.chunk("n1#00000").is_some());
    }

    #[test]
    fn concurrent_builds_are_single_flight() {
        let e = CountingEmbedder::new(HashEmbedder::default());
        let store = NoteIndexStore::in_memory();
        let cfg = ChunkingConfig::default();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| build_index("p1", &notes(), &cfg, &e, &store).unwrap());
            }
        });
        assert_eq!(store.builds(), 1);
        assert_eq!(e.calls(), 3);
    }
}
