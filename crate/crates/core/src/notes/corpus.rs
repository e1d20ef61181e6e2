use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use crate::model::{read_jsonl, JsonlError, NoteDocument};
use crate::text;

/// All notes known to the service, grouped by patient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoteCorpus {
    by_patient: BTreeMap<String, Vec<NoteDocument>>,
}

impl NoteCorpus {
    pub fn new(notes: Vec<NoteDocument>) -> Self {
        let mut by_patient: BTreeMap<String, Vec<NoteDocument>> = BTreeMap::new();
        for n in notes {
            by_patient.entry(n.patient_scope.clone()).or_default().push(n);
        }
        for notes in by_patient.values_mut() {
            notes.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
        }
        Self { by_patient }
    }

    /// Reads one `{id, patient, timestamp, text}` record per line.
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self, JsonlError> {
        let file = std::fs::File::open(path)?;
        Ok(Self::new(read_jsonl(BufReader::new(file))?))
    }

    pub fn parse_jsonl(source: &str) -> Result<Self, JsonlError> {
        Ok(Self::new(read_jsonl(source.as_bytes())?))
    }

    /// The patient's notes, oldest first. Unknown patients have none.
    pub fn for_patient(&self, patient: &str) -> &[NoteDocument] {
        self.by_patient.get(patient).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_patient(&self, patient: &str) -> bool {
        self.by_patient.contains_key(patient)
    }

    pub fn patients(&self) -> impl Iterator<Item = &str> {
        self.by_patient.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_patient.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Content hash of a note set: ids, timestamps and texts, independent of
/// the order the notes are given in.
pub fn corpus_fingerprint(notes: &[NoteDocument]) -> String {
    let mut parts: Vec<String> = notes.iter().map(|n| format!("{}\u{1f}{}\u{1f}{}", n.id, n.timestamp, n.text)).collect();
    parts.sort();
    text::sha256_hex(parts.join("\u{1e}").as_bytes())
}
