//! Demo data bundled with the crate: a MIMIC-style and an OMOP-style
//! database seed, clinical notes for the MIMIC-style patients, a scripted
//! LLM transcript that answers the demo questions, and sample benchmark
//! files in each supported dataset shape.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rusqlite::Connection;

use crate::embedding::HashEmbedder;
use crate::llm::{Gateway, ScriptRule, ScriptedBackend};
use crate::model::DatasetProfile;
use crate::navigator::{ClockMode, Navigator, PipelineConfig};
use crate::notes::NoteCorpus;
use crate::structured::{Database, DbError};

pub const MIMIC_DEMO_SQL: &str = include_str!("../fixtures/mimic_demo.sql");
pub const OMOP_DEMO_SQL: &str = include_str!("../fixtures/omop_demo.sql");
pub const NOTES_JSONL: &str = include_str!("../fixtures/notes.jsonl");
pub const SCRIPT_JSONL: &str = include_str!("../fixtures/fixture_script.jsonl");
pub const BENCHMARK_JSONL: &str = include_str!("../fixtures/benchmark.jsonl");
pub const EHRNOTEQA_JSONL: &str = include_str!("../fixtures/ehrnoteqa_sample.jsonl");
pub const EHRSQL_JSON: &str = include_str!("../fixtures/ehrsql_sample.json");
pub const DRUGEHRQA_CSV: &str = include_str!("../fixtures/drugehrqa_sample.csv");

/// Cost per 1,000 tokens charged by the scripted backend in demo runs.
pub const SCRIPTED_COST_PER_1K: f64 = 0.002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FixtureDb {
    Mimic,
    Omop,
}

impl FixtureDb {
    /// Accepts the names the CLI uses for `--db`: `fixture` and
    /// `fixture-omop`.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fixture" | "fixture-mimic" => Some(Self::Mimic),
            "fixture-omop" => Some(Self::Omop),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::Mimic => "fixture",
            Self::Omop => "fixture-omop",
        }
    }

    pub fn seed(self) -> &'static str {
        match self {
            Self::Mimic => MIMIC_DEMO_SQL,
            Self::Omop => OMOP_DEMO_SQL,
        }
    }

    pub fn profile(self) -> DatasetProfile {
        match self {
            Self::Mimic => DatasetProfile::Fixture,
            Self::Omop => DatasetProfile::Omop,
        }
    }

    /// Writes a fresh database file `<dir>/<id>.db` from the seed.
    pub fn materialize(self, dir: &Path) -> Result<PathBuf, rusqlite::Error> {
        let path = dir.join(format!("{}.db", self.id()));
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| rusqlite::Error::ToSqlConversionFailure(Box::new(e)))?;
        }
        let conn = Connection::open(&path)?;
        conn.execute_batch(self.seed())?;
        conn.close().map_err(|(_, e)| e)?;
        Ok(path)
    }
}

/// SQL that returns a row when `:patient_id` names a known patient.
pub fn patient_lookup_sql(profile: DatasetProfile) -> Option<&'static str> {
    match profile {
        DatasetProfile::Fixture | DatasetProfile::Ehrsql | DatasetProfile::Drugehrqa | DatasetProfile::Ehrnoteqa => {
            Some("SELECT 1 FROM patients WHERE subject_id = :patient_id")
        }
        DatasetProfile::Omop => Some("SELECT 1 FROM person WHERE person_id = :patient_id"),
    }
}

pub fn notes() -> NoteCorpus {
    NoteCorpus::parse_jsonl(NOTES_JSONL).expect("bundled notes parse")
}

pub fn script() -> Vec<ScriptRule> {
    ScriptedBackend::parse(SCRIPT_JSONL).expect("bundled script parses")
}

pub fn scripted_backend() -> ScriptedBackend {
    ScriptedBackend::new(script(), SCRIPTED_COST_PER_1K)
}

/// A navigator over a freshly materialized demo database with the bundled
/// notes, a fresh scripted backend, the hash embedder and a virtual clock.
pub fn demo_navigator(kind: FixtureDb, dir: &Path) -> Result<Navigator, DbError> {
    demo_navigator_with(kind, dir, scripted_backend())
}

/// [`demo_navigator`] with a caller-supplied script.
pub fn demo_navigator_with(kind: FixtureDb, dir: &Path, backend: ScriptedBackend) -> Result<Navigator, DbError> {
    let path = kind.materialize(dir)?;
    let db = Arc::new(Database::open(kind.id(), path)?);
    let gateway = Arc::new(Gateway::with_defaults(Arc::new(backend)));
    let config = PipelineConfig { profile: kind.profile(), ..PipelineConfig::default() };
    Ok(Navigator::new(gateway, Arc::new(HashEmbedder::default()), config)
        .with_database(db)
        .with_notes(Arc::new(notes()))
        .with_clock(ClockMode::Virtual))
}

/// Directory holding the fixture files in a source checkout.
pub fn source_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_data_parses() {
        assert_eq!(notes().patients().collect::<Vec<_>>(), ["10006", "10011", "10013"]);
        assert!(script().len() > 40);
    }

    #[test]
    fn materialized_databases_open() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [FixtureDb::Mimic, FixtureDb::Omop] {
            let path = kind.materialize(dir.path()).unwrap();
            let db = crate::structured::Database::open(kind.id(), &path).unwrap();
            assert!(!crate::structured::discover_schema(&db).unwrap().tables.is_empty());
            // idempotent
            kind.materialize(dir.path()).unwrap();
        }
    }
}
