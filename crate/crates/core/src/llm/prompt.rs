//! Prompt templates with `{name}` placeholders.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::LlmError;

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
    pub required: BTreeSet<String>,
}

impl PromptTemplate {
    /// Every `{identifier}` in `text` becomes a required placeholder. Braces
    /// around anything else (JSON examples, for instance) are literal text.
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let required = placeholder_re()
            .captures_iter(&text)
            .map(|c| c[1].to_owned())
            .collect();
        Self { name: name.into(), text, required }
    }

    /// Substitutes every placeholder with its binding, verbatim. Bound values
    /// are not rescanned, and bindings with no matching placeholder are
    /// ignored.
    pub fn render<K, V>(&self, bindings: &BTreeMap<K, V>) -> Result<String, LlmError>
    where
        K: AsRef<str> + Ord,
        V: AsRef<str>,
    {
        let lookup: BTreeMap<&str, &str> = bindings.iter().map(|(k, v)| (k.as_ref(), v.as_ref())).collect();
        let missing: Vec<String> = self
            .required
            .iter()
            .filter(|name| !lookup.contains_key(name.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(LlmError::MissingPlaceholders { template: self.name.clone(), missing });
        }
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for caps in placeholder_re().captures_iter(&self.text) {
            let whole = caps.get(0).expect("group 0");
            out.push_str(&self.text[last..whole.start()]);
            out.push_str(lookup[&caps[1]]);
            last = whole.end();
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

/// The six prompts the pipeline uses.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub table_description: PromptTemplate,
    pub ehrsql_sql: PromptTemplate,
    pub drugehrqa_sql: PromptTemplate,
    pub omop_sql: PromptTemplate,
    pub answer_synthesis: PromptTemplate,
    pub note_qa: PromptTemplate,
}

const FILES: [&str; 6] = [
    "table_description",
    "ehrsql_sql",
    "drugehrqa_sql",
    "omop_sql",
    "answer_synthesis",
    "note_qa",
];

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            table_description: PromptTemplate::new("table_description", include_str!("../../prompts/table_description.txt")),
            ehrsql_sql: PromptTemplate::new("ehrsql_sql", include_str!("../../prompts/ehrsql_sql.txt")),
            drugehrqa_sql: PromptTemplate::new("drugehrqa_sql", include_str!("../../prompts/drugehrqa_sql.txt")),
            omop_sql: PromptTemplate::new("omop_sql", include_str!("../../prompts/omop_sql.txt")),
            answer_synthesis: PromptTemplate::new("answer_synthesis", include_str!("../../prompts/answer_synthesis.txt")),
            note_qa: PromptTemplate::new("note_qa", include_str!("../../prompts/note_qa.txt")),
        }
    }

    /// Loads `<name>.txt` overrides from `dir`; files that are absent keep
    /// the built-in text.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::builtin();
        for name in FILES {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let t = PromptTemplate::new(name, std::fs::read_to_string(&path)?);
            match name {
                "table_description" => set.table_description = t,
                "ehrsql_sql" => set.ehrsql_sql = t,
                "drugehrqa_sql" => set.drugehrqa_sql = t,
                "omop_sql" => set.omop_sql = t,
                "answer_synthesis" => set.answer_synthesis = t,
                _ => set.note_qa = t,
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn table_reviewer_prompt_renders_table_name() {
        let set = PromptSet::builtin();
        let out = set
            .table_description
            .render(&bind(&[
                ("table_name", "prescriptions"),
                ("columns", "row_id INTEGER\ndrug TEXT"),
                ("primary_keys", "row_id"),
                ("foreign_keys", "hadm_id→admissions.hadm_id"),
            ]))
            .unwrap();
        assert!(out.contains("Table Name: prescriptions"));
        assert!(out.contains("Foreign Keys: hadm_id→admissions.hadm_id"));
        assert!(!out.contains('{'));
    }

    #[test]
    fn zero_placeholder_template_is_identity() {
        let t = PromptTemplate::new("plain", "nothing to fill");
        assert!(t.required.is_empty());
        assert_eq!(t.render(&BTreeMap::<String, String>::new()).unwrap(), "nothing to fill");
    }

    #[test]
    fn unbound_placeholder_is_named() {
        let set = PromptSet::builtin();
        let err = set
            .ehrsql_sql
            .render(&bind(&[("query_str", "q")]))
            .unwrap_err();
        match err {
            LlmError::MissingPlaceholders { missing, .. } => assert_eq!(missing, vec!["schema".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_example_braces_are_not_placeholders() {
        let set = PromptSet::builtin();
        assert_eq!(
            set.omop_sql.required,
            ["dialect", "query_str", "schema"].iter().map(|s| s.to_string()).collect()
        );
        let out = set
            .omop_sql
            .render(&bind(&[("dialect", "SQLite"), ("schema", "S"), ("query_str", "Q")]))
            .unwrap();
        assert!(out.contains("\"SQL\": \"Generated SQL query\""));
    }

    #[test]
    fn values_are_inserted_verbatim() {
        let t = PromptTemplate::new("t", "A={a} B={b}");
        let out = t.render(&bind(&[("a", "{b}"), ("b", "x & <y>")])).unwrap();
        assert_eq!(out, "A={b} B=x & <y>");
    }

    #[test]
    fn every_builtin_prompt_declares_expected_slots() {
        let set = PromptSet::builtin();
        let names = |t: &PromptTemplate| t.required.iter().cloned().collect::<Vec<_>>();
        assert_eq!(names(&set.table_description), ["columns", "foreign_keys", "primary_keys", "table_name"]);
        assert_eq!(names(&set.ehrsql_sql), ["query_str", "schema"]);
        assert_eq!(names(&set.drugehrqa_sql), ["dialect", "query_str", "schema"]);
        assert_eq!(names(&set.answer_synthesis), ["context_str", "notes", "query_str", "sql_query"]);
        assert_eq!(names(&set.note_qa), ["enhanced_bge", "query"]);
    }
}
