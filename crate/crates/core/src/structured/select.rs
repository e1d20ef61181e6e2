use crate::embedding::{embed, EmbedError, Embedder, VectorIndex};
use crate::model::{Question, TableDescription};

/// Text embedded for a table: its name, a colon, then the description.
pub fn description_text(desc: &TableDescription) -> String {
    format!("{}: {}", desc.table, desc.description)
}

/// Ranks tables by cosine similarity between the question and each
/// description embedding and keeps the best `k`. Equal scores fall back to
/// ascending table name.
pub fn select_tables(
    q: &Question,
    descriptions: &[TableDescription],
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<String>, EmbedError> {
    let mut index = VectorIndex::new();
    for d in descriptions {
        index.insert(d.table.clone(), embed(embedder, &description_text(d))?, d.schema_fingerprint.clone())?;
    }
    select_from_index(q, &index, embedder, k)
}

pub(crate) fn select_from_index(
    q: &Question,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<String>, EmbedError> {
    let query = embed(embedder, &q.text)?;
    Ok(index.top_k(&query, k)?.into_iter().map(|(name, _)| name).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;

    fn desc(table: &str, text: &str) -> TableDescription {
        TableDescription { table: table.into(), description: text.into(), schema_fingerprint: "fp".into() }
    }

    #[test]
    fn fewer_tables_than_k_returns_all() {
        let d = vec![desc("a", "x"), desc("b", "y"), desc("c", "z"), desc("d", "w")];
        let q = Question::new("q", "anything").unwrap();
        let got = select_tables(&q, &d, &HashEmbedder::default(), 10).unwrap();
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn identical_descriptions_tie_break_by_name() {
        // the name is embedded too, so make names hash-neutral by giving both
        // tables the same token content except the name itself
        let e = HashEmbedder::default();
        let d = vec![desc("zeta", "same text"), desc("alpha", "same text")];
        let mut index = VectorIndex::new();
        for x in &d {
            // embed only the description so the two vectors are identical
            index.insert(x.table.clone(), embed(&e, &x.description).unwrap(), "").unwrap();
        }
        let q = Question::new("q", "same text").unwrap();
        assert_eq!(select_from_index(&q, &index, &e, 2).unwrap(), ["alpha", "zeta"]);
    }
}
