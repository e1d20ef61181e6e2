use super::index::NoteIndex;
use crate::embedding::{embed, EmbedError, Embedder};
use crate::model::{Question, ScoredChunk, StructuredEvidence, UnstructuredEvidence};

/// Joins the question and the serialized structured evidence into the one
/// text that is embedded for retrieval.
pub const QUERY_SEPARATOR: &str = "\n[structured evidence]\n";

/// Renders result rows as `col=value; col=value`, one row per line, at most
/// `max_rows` rows.
pub fn serialize_structured_for_query(e: &StructuredEvidence, max_rows: usize) -> String {
    if e.rows.is_empty() {
        return "(no rows)".to_owned();
    }
    let mut lines: Vec<String> = e
        .rows
        .iter()
        .take(max_rows)
        .map(|row| e.columns.iter().zip(row).map(|(c, v)| format!("{c}={v}")).collect::<Vec<_>>().join("; "))
        .collect();
    if e.rows.len() > max_rows {
        lines.push(format!("(+{} more rows)", e.rows.len() - max_rows));
    }
    lines.join("\n")
}

/// Ranks the patient's note chunks against the question, fused with the
/// structured evidence when there is any.
///
/// Without structured evidence the result is flagged `fallback_mode`, and
/// the question's time window and section hints (if given) restrict the
/// candidate chunks before ranking.
pub fn retrieve_chunks(
    q: &Question,
    structured: Option<&StructuredEvidence>,
    index: &NoteIndex,
    embedder: &dyn Embedder,
    k: usize,
    max_rows: usize,
) -> Result<UnstructuredEvidence, EmbedError> {
    let fallback_mode = structured.is_none();
    let query_text = match structured {
        Some(e) => format!("{}{QUERY_SEPARATOR}{}", q.text, serialize_structured_for_query(e, max_rows)),
        None => q.text.clone(),
    };
    if index.is_empty() || k == 0 {
        return Ok(UnstructuredEvidence { chunks: Vec::new(), k_used: k, fallback_mode });
    }
    let query = embed(embedder, &query_text)?;
    let window = q.filters.time_window;
    let sections: Vec<String> = q.filters.sections.iter().map(|s| s.trim().trim_end_matches(':').to_lowercase()).collect();
    let keep = |key: &str| {
        if !fallback_mode {
            return true;
        }
        let Some(chunk) = index.chunk(key) else { return false };
        let in_window = window.is_none_or(|w| w.contains(chunk.timestamp));
        let in_section = sections.is_empty() || chunk.sections.iter().any(|s| sections.contains(s));
        in_window && in_section
    };
    let ranked = index.vectors().top_k_where(&query, k, keep)?;
    let chunks = ranked
        .into_iter()
        .filter_map(|(key, score)| {
            index.chunk(&key).map(|c| {
                let mut chunk = c.clone();
                chunk.embedding = None;
                ScoredChunk { chunk, score }
            })
        })
        .collect();
    Ok(UnstructuredEvidence { chunks, k_used: k, fallback_mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SqlValue;

    fn evidence(rows: usize) -> StructuredEvidence {
        StructuredEvidence {
            sql: "SELECT drug, dose FROM rx".into(),
            columns: vec!["drug".into(), "dose".into()],
            rows: (0..rows).map(|_| vec![SqlValue::Text("aspirin".into()), SqlValue::Text("81mg".into())]).collect(),
            attempt_count: 1,
        }
    }

    #[test]
    fn serialization_cases() {
        assert_eq!(serialize_structured_for_query(&evidence(1), 20), "drug=aspirin; dose=81mg");
        assert_eq!(serialize_structured_for_query(&evidence(0), 20), "(no rows)");
        let text = serialize_structured_for_query(&evidence(50), 20);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 20 + 1);
        assert_eq!(*lines.last().unwrap(), format!("(+{} more rows)", 50 - 20));
    }
}
