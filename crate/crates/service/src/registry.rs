//! Builds one navigator per configured database, sharing the model
//! gateway, embedder and description cache.

use std::path::PathBuf;
use std::sync::Arc;

use ehrnav_core::embedding::{EmbedError, Embedder, HashEmbedder, RemoteEmbedder, RemoteEmbedderConfig};
use ehrnav_core::fixtures::{self, SCRIPTED_COST_PER_1K};
use ehrnav_core::llm::{
    ChatBackend, Gateway, GatewaySettings, LlmError, PromptSet, RemoteChatBackend, RemoteChatConfig, ScriptedBackend,
};
use ehrnav_core::model::JsonlError;
use ehrnav_core::notes::{NoteCorpus, NoteIndexStore};
use ehrnav_core::structured::{Database, DbError, DescriptionCache};
use ehrnav_core::{DatasetProfile, Navigator};
use thiserror::Error;

use crate::config::{ConfigError, DatabaseSection, EmbeddingBackendKind, LlmBackendKind, ServiceConfig};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("LLM backend: {0}")]
    Llm(#[from] LlmError),
    #[error("embedding backend: {0}")]
    Embedding(#[from] EmbedError),
    #[error("database `{id}`: {source}")]
    Db { id: String, source: DbError },
    #[error("{what} {path}: {source}")]
    Io { what: &'static str, path: PathBuf, source: std::io::Error },
    #[error("{what}: {source}")]
    Jsonl { what: String, source: JsonlError },
    #[error("materializing fixture `{id}`: {message}")]
    Fixture { id: String, message: String },
}

pub struct Registered {
    pub id: String,
    pub profile: DatasetProfile,
    pub navigator: Navigator,
}

pub struct Registry {
    entries: Vec<Registered>,
    gateway: Arc<Gateway>,
    _scratch: Option<tempfile::TempDir>,
}

fn chat_backend(config: &ServiceConfig) -> Result<Arc<dyn ChatBackend>, BuildError> {
    let llm = &config.llm;
    let cost = llm.cost_per_1k_tokens;
    Ok(match llm.backend {
        LlmBackendKind::Scripted => Arc::new(match &llm.script {
            Some(path) => ScriptedBackend::from_file(path, cost.unwrap_or(SCRIPTED_COST_PER_1K))?,
            None => ScriptedBackend::new(fixtures::script(), cost.unwrap_or(SCRIPTED_COST_PER_1K)),
        }),
        LlmBackendKind::Remote => Arc::new(RemoteChatBackend::new(RemoteChatConfig {
            endpoint: llm.endpoint.clone().unwrap_or_default(),
            model: llm.model.clone().unwrap_or_default(),
            api_key_env: llm.api_key_env.clone(),
            cost_per_1k_tokens: cost.unwrap_or(0.0),
            timeout_s: llm.request_timeout_s,
        })?),
    })
}

fn embedder(config: &ServiceConfig) -> Result<Arc<dyn Embedder>, BuildError> {
    let e = &config.embedding;
    Ok(match e.backend {
        EmbeddingBackendKind::Hash => Arc::new(HashEmbedder::new(e.dimension)),
        EmbeddingBackendKind::Remote => Arc::new(RemoteEmbedder::new(RemoteEmbedderConfig {
            endpoint: e.endpoint.clone().unwrap_or_default(),
            model: e.model.clone().unwrap_or_default(),
            dimension: e.dimension,
            api_key_env: e.api_key_env.clone(),
            timeout_s: e.request_timeout_s,
        })?),
    })
}

fn notes_for(db: &DatabaseSection) -> Result<NoteCorpus, BuildError> {
    match (&db.notes, db.fixture()) {
        (Some(path), _) => NoteCorpus::from_jsonl(path)
            .map_err(|source| BuildError::Jsonl { what: format!("notes {}", path.display()), source }),
        (None, Some(_)) => Ok(fixtures::notes()),
        (None, None) => Ok(NoteCorpus::new(Vec::new())),
    }
}

impl Registry {
    /// Validates `config` and opens every database it lists.
    pub fn build(config: &ServiceConfig) -> Result<Self, BuildError> {
        config.validate()?;
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::with_overrides(dir)
                .map_err(|source| BuildError::Io { what: "prompts_dir", path: dir.clone(), source })?,
            None => PromptSet::builtin(),
        };
        let settings = GatewaySettings { max_output_tokens: config.llm.max_output_tokens, ..GatewaySettings::default() };
        let gateway = Arc::new(Gateway::new(chat_backend(config)?, prompts, settings));
        let embedder = embedder(config)?;
        let descriptions = Arc::new(match &config.description_cache {
            Some(path) => DescriptionCache::open(path)
                .map_err(|source| BuildError::Jsonl { what: format!("description cache {}", path.display()), source })?,
            None => DescriptionCache::in_memory(),
        });
        let needs_scratch = config.data_dir.is_none() && config.databases.iter().any(|d| d.fixture().is_some());
        let scratch = if needs_scratch {
            Some(tempfile::tempdir().map_err(|source| BuildError::Io {
                what: "scratch directory",
                path: std::env::temp_dir(),
                source,
            })?)
        } else {
            None
        };
        let data_dir = config.data_dir.clone().or_else(|| scratch.as_ref().map(|d| d.path().to_owned()));
        if let Some(dir) = &data_dir {
            std::fs::create_dir_all(dir).map_err(|source| BuildError::Io { what: "data_dir", path: dir.clone(), source })?;
        }

        let mut entries = Vec::new();
        for section in &config.databases {
            let id = section.resolved_id();
            let profile = section.resolved_profile().expect("validated");
            let path = match (section.fixture(), &data_dir) {
                (Some(f), Some(dir)) => {
                    let dir = dir.join(&id);
                    std::fs::create_dir_all(&dir)
                        .map_err(|source| BuildError::Io { what: "data_dir", path: dir.clone(), source })?;
                    f.materialize(&dir).map_err(|e| BuildError::Fixture { id: id.clone(), message: e.to_string() })?
                }
                _ => PathBuf::from(&section.source),
            };
            let db = Database::open(id.clone(), &path).map_err(|source| BuildError::Db { id: id.clone(), source })?;
            let indexes = match &config.index_dir {
                Some(dir) => {
                    let dir = dir.join(&id);
                    NoteIndexStore::persistent(&dir)
                        .map_err(|source| BuildError::Io { what: "index_dir", path: dir.clone(), source })?
                }
                None => NoteIndexStore::in_memory(),
            };
            let navigator = Navigator::new(Arc::clone(&gateway), Arc::clone(&embedder), config.pipeline_config(profile))
                .with_database(Arc::new(db))
                .with_notes(Arc::new(notes_for(section)?))
                .with_description_cache(Arc::clone(&descriptions))
                .with_index_store(Arc::new(indexes))
                .with_clock(config.clock_mode());
            entries.push(Registered { id, profile, navigator });
        }
        Ok(Self { entries, gateway, _scratch: scratch })
    }

    pub fn entries(&self) -> &[Registered] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&Registered> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// The first database registered with `profile`, or the first database
    /// at all when no profile is given.
    pub fn for_profile(&self, profile: Option<DatasetProfile>) -> Option<&Registered> {
        match profile {
            Some(p) => self.entries.iter().find(|e| e.profile == p),
            None => self.entries.first(),
        }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }
}
