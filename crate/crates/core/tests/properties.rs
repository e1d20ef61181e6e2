use std::collections::BTreeMap;

use ehrnav_core::embedding::{Vector, VectorIndex};
use ehrnav_core::eval::{exact_match, exact_match_text, rouge_l, rouge_l_tokens, GoldAnswer};
use ehrnav_core::fixtures::FixtureDb;
use ehrnav_core::model::{AgentRole, NoteChunk, NoteDocument, SqlValue, Timestamp, TraceRecord, TraceStep};
use ehrnav_core::notes::{chunk_note, ChunkingConfig};
use ehrnav_core::structured::{execute_sql, Database, ExecError, SqlParams};
use ehrnav_core::synthesis::{format_answer, parse_answer};
use ehrnav_core::text;
use ehrnav_core::Question;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-z]{1,8}",
        1 => "[a-z]{1,6}[.?!]",
        1 => "[0-9]{1,3}(mg|mL)?",
        1 => Just("é".to_owned()),
    ]
}

fn note_text(max_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec((word(), prop_oneof![6 => Just(" "), 1 => Just("\n"), 1 => Just("\n\n"), 1 => Just("\t")]), 0..max_words)
        .prop_map(|parts| parts.into_iter().map(|(w, sep)| format!("{w}{sep}")).collect())
}

fn ts() -> Timestamp {
    "2164-10-24 09:30:00".parse().unwrap()
}

fn note(text: String) -> NoteDocument {
    NoteDocument { id: "n1".into(), patient_scope: "p".into(), timestamp: ts(), text }
}

fn body_tokens(chunk: &NoteChunk) -> Vec<String> {
    text::tokenize(chunk.body())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn chunks_cover_the_note_and_overlap_exactly(
        text in note_text(700),
        size in 8usize..300,
        overlap_frac in 0.0f64..0.9,
        sentence_aware in any::<bool>(),
    ) {
        let overlap = ((size as f64) * overlap_frac) as usize;
        let config = ChunkingConfig { chunk_size_tokens: size, overlap_tokens: overlap, sentence_aware, ..ChunkingConfig::default() };
        let tokens = text::tokenize(&text);
        let chunks = chunk_note(&note(text), &config);
        if tokens.is_empty() {
            prop_assert!(chunks.is_empty());
            return Ok(());
        }
        let mut rebuilt: Vec<String> = Vec::new();
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.index, i);
            prop_assert!(c.token_count() <= size && c.token_count() > 0);
            prop_assert!(c.text.starts_with(&NoteChunk::prefix(c.timestamp)));
            let body = body_tokens(c);
            prop_assert_eq!(&body[..], &tokens[c.token_span.0..c.token_span.1]);
            if i == 0 {
                prop_assert_eq!(c.token_span.0, 0);
                rebuilt.extend(body);
            } else {
                let prev = chunks[i - 1].token_span;
                let shared = prev.1 - c.token_span.0;
                prop_assert!(c.token_span.0 > prev.0);
                if !sentence_aware {
                    prop_assert_eq!(shared, overlap);
                }
                rebuilt.extend(body.into_iter().skip(shared));
            }
        }
        prop_assert_eq!(chunks.last().unwrap().token_span.1, tokens.len());
        prop_assert_eq!(rebuilt, tokens);
    }

    #[test]
    fn top_k_is_a_prefix_of_the_full_ranking(
        vectors in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..60),
        query in prop::collection::vec(-1.0f64..1.0, 4),
        k in 0usize..70,
        rotate in 0usize..60,
    ) {
        prop_assume!(query.iter().any(|x| x.abs() > 1e-6));
        let usable: Vec<(String, Vector)> = vectors
            .into_iter()
            .enumerate()
            .filter_map(|(i, v)| Vector::new(v).ok().filter(|v| v.norm() > 1e-6).map(|v| (format!("k{i:03}"), v)))
            .collect();
        prop_assume!(!usable.is_empty());
        let q = Vector::new(query).unwrap();
        let mut forward = VectorIndex::new();
        for (key, v) in &usable {
            forward.insert(key.clone(), v.clone(), "").unwrap();
        }
        let mut rotated = VectorIndex::new();
        let mut shifted = usable.clone();
        shifted.rotate_left(rotate % usable.len());
        for (key, v) in &shifted {
            rotated.insert(key.clone(), v.clone(), "").unwrap();
        }
        let full = forward.top_k(&q, usable.len()).unwrap();
        let top = forward.top_k(&q, k).unwrap();
        prop_assert_eq!(top.len(), k.min(usable.len()));
        prop_assert_eq!(&top[..], &full[..top.len()]);
        prop_assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert_eq!(top, rotated.top_k(&q, k).unwrap());
    }

    #[test]
    fn trace_totals_are_step_sums(
        steps in prop::collection::vec((0u64..500, 0u64..2000, 0u64..300, 0.0f64..0.01), 0..20),
        measured in 0u64..5000,
    ) {
        let steps: Vec<TraceStep> = steps
            .into_iter()
            .map(|(ms, p, c, cost)| TraceStep {
                agent: AgentRole::SqlWriter,
                tool: "chat_completion".into(),
                input_digest: "i".into(),
                output_digest: "o".into(),
                wall_ms: ms,
                prompt_tokens: p,
                completion_tokens: c,
                cost,
            })
            .collect();
        let record = TraceRecord::from_steps("t", "q", steps.clone(), measured);
        prop_assert_eq!(record.total_prompt_tokens, steps.iter().map(|s| s.prompt_tokens).sum::<u64>());
        prop_assert_eq!(record.total_completion_tokens, steps.iter().map(|s| s.completion_tokens).sum::<u64>());
        prop_assert_eq!(record.total_cost, steps.iter().map(|s| s.cost).sum::<f64>());
        prop_assert!(record.total_latency_ms >= steps.iter().map(|s| s.wall_ms).sum::<u64>());
        let back: TraceRecord = serde_json::from_str(&serde_json::to_string(&record).unwrap()).unwrap();
        prop_assert_eq!(back, record);
    }

    #[test]
    fn question_and_values_survive_serde(
        text in "[a-zA-Z ?]{0,12}[a-z][a-zA-Z ?]{0,12}",
        patient in prop::option::of("[0-9]{1,6}"),
        values in prop::collection::vec(prop_oneof![
            Just(SqlValue::Null),
            any::<i64>().prop_map(SqlValue::Integer),
            (-1e9f64..1e9).prop_map(|x| SqlValue::Real(x + 0.5)),
            "[a-z ]{0,10}".prop_map(SqlValue::Text),
        ], 0..8),
    ) {
        let mut q = Question::new("q", text).unwrap();
        q.patient_scope = patient;
        let back: Question = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        prop_assert_eq!(back, q);
        let back: Vec<SqlValue> = serde_json::from_str(&serde_json::to_string(&values).unwrap()).unwrap();
        prop_assert_eq!(back, values);
    }

    #[test]
    fn rouge_is_bounded_and_f1_symmetric(a in prop::collection::vec("[a-d]", 0..30), b in prop::collection::vec("[a-d]", 0..30)) {
        let ab = rouge_l_tokens(&a, &b);
        let ba = rouge_l_tokens(&b, &a);
        prop_assert!((0.0..=1.0).contains(&ab.f1));
        prop_assert_eq!(ab.f1, ba.f1);
        prop_assert_eq!(ab.precision, ba.recall);
        if !a.is_empty() {
            prop_assert_eq!(rouge_l_tokens(&a, &a).f1, 1.0);
        }
        prop_assert_eq!(rouge_l(&a.join(" "), &b.join(" ")), ab);
    }

    #[test]
    fn exact_match_is_symmetric(a in "[ a-cA-C\t]{0,10}", b in "[ a-cA-C\t]{0,10}") {
        prop_assert_eq!(exact_match_text(&a, &b), exact_match_text(&b, &a));
        let sa = GoldAnswer::Set(a.split(',').map(str::to_owned).collect());
        let sb = GoldAnswer::Set(b.split(',').map(str::to_owned).collect());
        prop_assert_eq!(exact_match(&b, &sa), exact_match(&a, &sb));
    }

    #[test]
    fn formatted_answers_reparse(sql in "[a-z =*]{0,30}", notes in "[a-z .]{0,40}", response in "[a-z0-9 .]{1,40}") {
        prop_assume!(!response.trim().is_empty());
        let first = parse_answer(&format!("SQL QUERY: {sql}\nEvidence from notes: {notes}\nResponse: {response}"), "q").unwrap();
        let again = parse_answer(&format_answer(&first), "q").unwrap();
        prop_assert_eq!(&again.sql_section, &first.sql_section);
        prop_assert_eq!(&again.notes_evidence_section, &first.notes_evidence_section);
        prop_assert_eq!(&again.response_section, response.trim());
    }
}

fn sql_fragment() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("SELECT * FROM patients".to_owned()),
        Just("SELECT 1".to_owned()),
        Just("DROP TABLE patients".to_owned()),
        Just("DELETE FROM labevents".to_owned()),
        Just("INSERT INTO patients VALUES (1, 'M', '2000-01-01')".to_owned()),
        Just("UPDATE prescriptions SET drug = 'x'".to_owned()),
        Just("PRAGMA writable_schema = 1".to_owned()),
        Just("ATTACH DATABASE ':memory:' AS m".to_owned()),
        Just("CREATE TABLE z(a)".to_owned()),
        Just("WITH x AS (SELECT 1)".to_owned()),
        Just("VACUUM".to_owned()),
        Just(";".to_owned()),
        Just("--".to_owned()),
        Just("/*".to_owned()),
        Just("*/".to_owned()),
        Just("'".to_owned()),
        Just("\"".to_owned()),
        Just("\n".to_owned()),
        "[a-z(),=*' ]{0,6}",
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn no_statement_changes_the_database(parts in prop::collection::vec(sql_fragment(), 1..6)) {
        thread_local! {
            static DB: (tempfile::TempDir, Database, String) = {
                let dir = tempfile::tempdir().unwrap();
                let path = FixtureDb::Mimic.materialize(dir.path()).unwrap();
                let db = Database::open("fixture", path).unwrap();
                let hash = db.content_hash().unwrap();
                (dir, db, hash)
            };
        }
        let sql = parts.join(" ");
        DB.with(|(_, db, hash)| {
            let result = execute_sql(db, &sql, &SqlParams::new(), std::time::Duration::from_secs(2));
            if let Err(e) = &result {
                prop_assert!(!matches!(e, ExecError::Unavailable(_)), "{e}");
            }
            prop_assert_eq!(&db.content_hash().unwrap(), hash);
            Ok(())
        })?;
    }
}

#[test]
fn bound_parameters_are_never_spliced() {
    let dir = tempfile::tempdir().unwrap();
    let path = FixtureDb::Mimic.materialize(dir.path()).unwrap();
    let db = Database::open("fixture", path).unwrap();
    let hash = db.content_hash().unwrap();
    let params = BTreeMap::from([(":patient_id".to_owned(), SqlValue::Text("1; DROP TABLE patients; --".into()))]);
    let r = execute_sql(&db, "SELECT * FROM patients WHERE subject_id = :patient_id", &params, std::time::Duration::from_secs(2)).unwrap();
    assert!(r.rows.is_empty());
    assert_eq!(db.content_hash().unwrap(), hash);
}
