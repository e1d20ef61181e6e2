//! Service configuration: TOML file, then `EHRNAV_*` environment
//! overrides, then command-line flags.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ehrnav_core::fixtures::FixtureDb;
use ehrnav_core::navigator::{ClockMode, PipelineConfig};
use ehrnav_core::notes::ChunkingConfig;
use ehrnav_core::structured::StructuredConfig;
use ehrnav_core::DatasetProfile;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variables read by [`ServiceConfig::apply_env`], in the order
/// they are applied.
pub const ENV_VARS: &[&str] = &[
    "EHRNAV_BIND",
    "EHRNAV_TRACE_STORE",
    "EHRNAV_DATA_DIR",
    "EHRNAV_DESCRIPTION_CACHE",
    "EHRNAV_INDEX_DIR",
    "EHRNAV_PROMPTS_DIR",
    "EHRNAV_WORKERS",
    "EHRNAV_CLOCK",
    "EHRNAV_MAX_ATTEMPTS",
    "EHRNAV_TIMEOUT_S",
    "EHRNAV_TABLE_K",
    "EHRNAV_NOTE_K",
    "EHRNAV_CHUNK_SIZE",
    "EHRNAV_CHUNK_OVERLAP",
    "EHRNAV_LLM_BACKEND",
    "EHRNAV_LLM_SCRIPT",
    "EHRNAV_LLM_ENDPOINT",
    "EHRNAV_LLM_MODEL",
    "EHRNAV_LLM_API_KEY_ENV",
    "EHRNAV_EMBEDDING_BACKEND",
    "EHRNAV_EMBEDDING_ENDPOINT",
    "EHRNAV_EMBEDDING_MODEL",
    "EHRNAV_EMBEDDING_DIMENSION",
    "EHRNAV_EMBEDDING_API_KEY_ENV",
];

/// Keys that would hold a credential. Config files name the environment
/// variable instead (`api_key_env`).
const SECRET_KEYS: &[&str] = &["api_key", "apikey", "key", "password", "secret", "token", "bearer", "authorization"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("`{key}` looks like a credential; store it in an environment variable and set `{key}_env` to its name")]
    SecretLiteral { key: String },
    #[error("{var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockSetting {
    /// Virtual with the scripted backend, wall-clock otherwise.
    #[default]
    Auto,
    System,
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackendKind {
    #[default]
    Scripted,
    Remote,
}

impl std::str::FromStr for LlmBackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown LLM backend `{other}` (expected scripted or remote)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingBackendKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub backend: LlmBackendKind,
    /// Scripted transcript; the bundled demo script when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub cost_per_1k_tokens: Option<f64>,
    pub request_timeout_s: u64,
    pub max_output_tokens: u32,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            backend: LlmBackendKind::Scripted,
            script: None,
            endpoint: None,
            model: None,
            api_key_env: None,
            cost_per_1k_tokens: None,
            request_timeout_s: 300,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub backend: EmbeddingBackendKind,
    pub dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub request_timeout_s: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            backend: EmbeddingBackendKind::Hash,
            dimension: 64,
            endpoint: None,
            model: None,
            api_key_env: None,
            request_timeout_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub max_attempts: u32,
    pub timeout_s: f64,
    pub table_k: usize,
    pub note_k: usize,
    pub query_max_rows: usize,
    pub sample_value_chars: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let s = StructuredConfig::default();
        let p = PipelineConfig::default();
        Self {
            max_attempts: s.max_attempts,
            timeout_s: s.timeout_s,
            table_k: s.table_k,
            note_k: p.note_k,
            query_max_rows: p.query_max_rows,
            sample_value_chars: s.sample_value_chars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseSection {
    /// Registry id used by `/schema/{db}`. Defaults to the fixture name or
    /// the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// `fixture`, `fixture-omop`, or a path to a SQLite file.
    pub source: String,
    /// Required for file sources; fixtures carry their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<DatasetProfile>,
    /// Notes JSONL. Fixture sources default to the bundled notes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<PathBuf>,
}

impl DatabaseSection {
    pub fn fixture(&self) -> Option<FixtureDb> {
        FixtureDb::from_name(&self.source)
    }

    pub fn resolved_id(&self) -> String {
        if let Some(id) = &self.id {
            return id.clone();
        }
        match self.fixture() {
            Some(f) => f.id().to_owned(),
            None => Path::new(&self.source)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.source.clone()),
        }
    }

    pub fn resolved_profile(&self) -> Option<DatasetProfile> {
        self.profile.or_else(|| self.fixture().map(FixtureDb::profile))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Append-only JSONL of every trace the service produced. In memory
    /// only when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_store: Option<PathBuf>,
    /// Where fixture databases are materialized. A temporary directory
    /// when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description_cache: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    /// Questions answered at once.
    pub workers: usize,
    pub clock: ClockSetting,
    pub pipeline: PipelineSection,
    pub chunking: ChunkingConfig,
    pub llm: LlmSection,
    pub embedding: EmbeddingSection,
    pub databases: Vec<DatabaseSection>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8077)),
            trace_store: None,
            data_dir: None,
            description_cache: None,
            index_dir: None,
            prompts_dir: None,
            workers: 4,
            clock: ClockSetting::Auto,
            pipeline: PipelineSection::default(),
            chunking: ChunkingConfig::default(),
            llm: LlmSection::default(),
            embedding: EmbeddingSection::default(),
            databases: Vec::new(),
        }
    }
}

fn find_secret_key(value: &toml::Value, path: &str) -> Option<String> {
    let toml::Value::Table(table) = value else {
        if let toml::Value::Array(items) = value {
            return items.iter().find_map(|v| find_secret_key(v, path));
        }
        return None;
    };
    for (k, v) in table {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        if SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()) {
            return Some(full);
        }
        if let Some(found) = find_secret_key(v, &full) {
            return Some(found);
        }
    }
    None
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn parse_env<T: std::str::FromStr>(var: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e: T::Err| ConfigError::Env { var: var.to_owned(), message: e.to_string() })
}

fn enum_from_str<T: for<'de> Deserialize<'de>>(var: &str, raw: &str) -> Result<T, ConfigError> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(raw.trim()))
        .map_err(|e| ConfigError::Env { var: var.to_owned(), message: e.to_string() })
}

impl ServiceConfig {
    /// Parses TOML. Relative paths are taken relative to `base`.
    pub fn from_toml(source: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let value: toml::Value = source
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| ConfigError::Parse { path: origin.to_owned(), message: e.to_string() })?;
        if let Some(key) = find_secret_key(&value, "") {
            return Err(ConfigError::SecretLiteral { key });
        }
        let mut config: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse { path: origin.to_owned(), message: e.to_string() })?;
        for p in [
            &mut config.trace_store,
            &mut config.data_dir,
            &mut config.description_cache,
            &mut config.index_dir,
            &mut config.prompts_dir,
            &mut config.llm.script,
        ] {
            resolve(base, p);
        }
        for db in &mut config.databases {
            resolve(base, &mut db.notes);
            if db.fixture().is_none() && Path::new(&db.source).is_relative() {
                db.source = base.join(&db.source).to_string_lossy().into_owned();
            }
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let source =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_owned(), source: e })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&source, base, path)
    }

    /// Applies `EHRNAV_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for &var in ENV_VARS {
            let Some(raw) = lookup(var) else { continue };
            let path = || Some(PathBuf::from(raw.trim()));
            match var {
                "EHRNAV_BIND" => self.bind = parse_env(var, &raw)?,
                "EHRNAV_TRACE_STORE" => self.trace_store = path(),
                "EHRNAV_DATA_DIR" => self.data_dir = path(),
                "EHRNAV_DESCRIPTION_CACHE" => self.description_cache = path(),
                "EHRNAV_INDEX_DIR" => self.index_dir = path(),
                "EHRNAV_PROMPTS_DIR" => self.prompts_dir = path(),
                "EHRNAV_WORKERS" => self.workers = parse_env(var, &raw)?,
                "EHRNAV_CLOCK" => self.clock = enum_from_str(var, &raw)?,
                "EHRNAV_MAX_ATTEMPTS" => self.pipeline.max_attempts = parse_env(var, &raw)?,
                "EHRNAV_TIMEOUT_S" => self.pipeline.timeout_s = parse_env(var, &raw)?,
                "EHRNAV_TABLE_K" => self.pipeline.table_k = parse_env(var, &raw)?,
                "EHRNAV_NOTE_K" => self.pipeline.note_k = parse_env(var, &raw)?,
                "EHRNAV_CHUNK_SIZE" => self.chunking.chunk_size_tokens = parse_env(var, &raw)?,
                "EHRNAV_CHUNK_OVERLAP" => self.chunking.overlap_tokens = parse_env(var, &raw)?,
                "EHRNAV_LLM_BACKEND" => self.llm.backend = parse_env(var, &raw)?,
                "EHRNAV_LLM_SCRIPT" => self.llm.script = path(),
                "EHRNAV_LLM_ENDPOINT" => self.llm.endpoint = Some(raw.trim().to_owned()),
                "EHRNAV_LLM_MODEL" => self.llm.model = Some(raw.trim().to_owned()),
                "EHRNAV_LLM_API_KEY_ENV" => self.llm.api_key_env = Some(raw.trim().to_owned()),
                "EHRNAV_EMBEDDING_BACKEND" => self.embedding.backend = enum_from_str(var, &raw)?,
                "EHRNAV_EMBEDDING_ENDPOINT" => self.embedding.endpoint = Some(raw.trim().to_owned()),
                "EHRNAV_EMBEDDING_MODEL" => self.embedding.model = Some(raw.trim().to_owned()),
                "EHRNAV_EMBEDDING_DIMENSION" => self.embedding.dimension = parse_env(var, &raw)?,
                "EHRNAV_EMBEDDING_API_KEY_ENV" => self.embedding.api_key_env = Some(raw.trim().to_owned()),
                _ => unreachable!("unhandled variable {var}"),
            }
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        config.apply_env(|v| std::env::var(v).ok())?;
        Ok(config)
    }

    /// Checks numeric bounds and that every referenced path exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let p = &self.pipeline;
        if p.table_k < 1 || p.note_k < 1 {
            return invalid(format!("table_k ({}) and note_k ({}) must be at least 1", p.table_k, p.note_k));
        }
        if p.max_attempts < 1 {
            return invalid("max_attempts must be at least 1".into());
        }
        if !(p.timeout_s.is_finite() && p.timeout_s > 0.0) {
            return invalid(format!("timeout_s must be positive, got {}", p.timeout_s));
        }
        if p.query_max_rows < 1 {
            return invalid("query_max_rows must be at least 1".into());
        }
        self.chunking.validate().map_err(|e| ConfigError::Invalid(e.0))?;
        if self.workers < 1 {
            return invalid("workers must be at least 1".into());
        }
        if self.embedding.dimension < 1 {
            return invalid("embedding dimension must be at least 1".into());
        }
        if self.llm.backend == LlmBackendKind::Remote && (self.llm.endpoint.is_none() || self.llm.model.is_none()) {
            return invalid("the remote LLM backend needs llm.endpoint and llm.model".into());
        }
        if self.embedding.backend == EmbeddingBackendKind::Remote
            && (self.embedding.endpoint.is_none() || self.embedding.model.is_none())
        {
            return invalid("the remote embedding backend needs embedding.endpoint and embedding.model".into());
        }
        let must_exist = |what: &str, path: &Path| {
            if path.exists() {
                Ok(())
            } else {
                invalid(format!("{what} {} does not exist", path.display()))
            }
        };
        if let Some(s) = &self.llm.script {
            must_exist("llm.script", s)?;
        }
        if let Some(d) = &self.prompts_dir {
            must_exist("prompts_dir", d)?;
        }
        for (what, file) in [("trace_store", &self.trace_store), ("description_cache", &self.description_cache)] {
            if let Some(f) = file {
                let parent = f.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                must_exist(&format!("directory of {what}"), parent)?;
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for db in &self.databases {
            let id = db.resolved_id();
            if !ids.insert(id.clone()) {
                return invalid(format!("database id `{id}` is registered twice"));
            }
            if db.fixture().is_none() {
                must_exist(&format!("database `{id}`"), Path::new(&db.source))?;
            }
            if db.resolved_profile().is_none() {
                return invalid(format!("database `{id}` needs a profile"));
            }
            if let Some(n) = &db.notes {
                must_exist(&format!("notes of `{id}`"), n)?;
            }
        }
        Ok(())
    }

    pub fn clock_mode(&self) -> ClockMode {
        match (self.clock, self.llm.backend) {
            (ClockSetting::System, _) => ClockMode::System,
            (ClockSetting::Virtual, _) => ClockMode::Virtual,
            (ClockSetting::Auto, LlmBackendKind::Scripted) => ClockMode::Virtual,
            (ClockSetting::Auto, LlmBackendKind::Remote) => ClockMode::System,
        }
    }

    pub fn pipeline_config(&self, profile: DatasetProfile) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            profile,
            structured: StructuredConfig {
                max_attempts: p.max_attempts,
                timeout_s: p.timeout_s,
                table_k: p.table_k,
                sample_value_chars: p.sample_value_chars,
            },
            chunking: self.chunking.clone(),
            note_k: p.note_k,
            query_max_rows: p.query_max_rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn parse(src: &str) -> Result<ServiceConfig, ConfigError> {
        ServiceConfig::from_toml(src, Path::new("/base"), Path::new("test.toml"))
    }

    #[test]
    fn defaults_match_the_pipeline_defaults() {
        let c = ServiceConfig::default();
        assert_eq!(c.pipeline_config(DatasetProfile::Fixture), PipelineConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn env_overrides_file_values() {
        let mut c = parse("[pipeline]\nnote_k = 5\ntable_k = 7\n").unwrap();
        let env = HashMap::from([("EHRNAV_NOTE_K", "3"), ("EHRNAV_CLOCK", "system")]);
        c.apply_env(|v| env.get(v).map(|s| s.to_string())).unwrap();
        assert_eq!(c.pipeline.note_k, 3);
        assert_eq!(c.pipeline.table_k, 7);
        assert_eq!(c.clock, ClockSetting::System);
        assert_eq!(c.pipeline.max_attempts, 3);
    }

    #[test]
    fn bad_env_value_names_the_variable() {
        let mut c = ServiceConfig::default();
        let err = c.apply_env(|v| (v == "EHRNAV_TIMEOUT_S").then(|| "soon".to_owned())).unwrap_err();
        assert!(err.to_string().starts_with("EHRNAV_TIMEOUT_S"), "{err}");
    }

    #[test]
    fn credential_literals_are_refused() {
        let err = parse("[llm]\nbackend = \"remote\"\napi_key = \"sk-123\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::SecretLiteral { ref key } if key == "llm.api_key"), "{err}");
        assert!(parse("[llm]\napi_key_env = \"OPENAI_API_KEY\"\n").is_ok());
    }

    #[test]
    fn unknown_keys_are_refused() {
        assert!(parse("[pipeline]\nnotek = 3\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let c = parse("trace_store = \"t.jsonl\"\n[[databases]]\nsource = \"db/x.sqlite\"\nprofile = \"ehrsql\"\n").unwrap();
        assert_eq!(c.trace_store.as_deref(), Some(Path::new("/base/t.jsonl")));
        assert_eq!(c.databases[0].source, "/base/db/x.sqlite");
        assert_eq!(c.databases[0].resolved_id(), "x");
    }

    #[test]
    fn bounds_are_checked() {
        let bad = [
            "[pipeline]\ntable_k = 0\n",
            "[pipeline]\nnote_k = 0\n",
            "[pipeline]\ntimeout_s = 0.0\n",
            "[pipeline]\ntimeout_s = -1.0\n",
            "[pipeline]\nmax_attempts = 0\n",
            "[chunking]\nchunk_size_tokens = 32\noverlap_tokens = 32\nsentence_aware = true\n",
            "[[databases]]\nsource = \"/nonexistent/x.db\"\nprofile = \"ehrsql\"\n",
            "[[databases]]\nsource = \"fixture\"\n[[databases]]\nsource = \"fixture\"\n",
            "[llm]\nbackend = \"remote\"\n",
        ];
        for src in bad {
            let c = parse(src).unwrap();
            assert!(c.validate().is_err(), "accepted:\n{src}");
        }
        let ok = parse("[chunking]\nchunk_size_tokens = 33\noverlap_tokens = 0\nsentence_aware = false\n[[databases]]\nsource = \"fixture-omop\"\n").unwrap();
        ok.validate().unwrap();
        assert_eq!(ok.databases[0].resolved_profile(), Some(DatasetProfile::Omop));
    }

    #[test]
    fn clock_follows_the_backend() {
        let mut c = ServiceConfig::default();
        assert_eq!(c.clock_mode(), ClockMode::Virtual);
        c.llm.backend = LlmBackendKind::Remote;
        assert_eq!(c.clock_mode(), ClockMode::System);
    }
}
