mod common;

use std::time::Duration;

use ehrnav_core::eval::{drop_gold_sql_timeouts, parse_dataset, run_benchmark, BenchmarkRun, RunOptions};
use ehrnav_core::fixtures::{self, FixtureDb};
use ehrnav_core::llm::{RoleTag, ScriptedBackend};
use ehrnav_core::structured::Database;
use ehrnav_core::DatasetProfile;

fn fixture_run(items: &[ehrnav_core::eval::BenchmarkItem], parallelism: usize) -> BenchmarkRun {
    let dir = tempfile::tempdir().unwrap();
    let nav = fixtures::demo_navigator(FixtureDb::Mimic, dir.path()).unwrap();
    let options = RunOptions { dataset: "fixture".into(), parallelism, ..RunOptions::default() };
    run_benchmark(items, &nav, &options)
}

#[test]
fn fixture_benchmark_matches_golden_report() {
    let items = parse_dataset(fixtures::BENCHMARK_JSONL, DatasetProfile::Fixture).unwrap();
    let run = fixture_run(&items, 4);
    let report = &run.report;
    assert_eq!((report.aggregates.correct, report.aggregates.items), (20, 20));
    assert_eq!(report.aggregates.errors, 0);
    assert_eq!(report.warmup.tables_described, 4);
    assert_eq!(report.warmup.patients_indexed, 3);
    assert_eq!(report.warmup.llm_calls, 4);
    // warmup took the describing, so each item makes one writer call per
    // attempt plus one synthesizer call
    for row in &report.items {
        assert_eq!(row.llm_calls, row.sql_attempts as usize + 1, "{}", row.id);
        assert_eq!(row.execution_match, Some(true), "{}", row.id);
    }
    let q04 = report.items.iter().find(|r| r.id == "q04").unwrap();
    assert_eq!(q04.sql_attempts, 2);
    let q20 = report.items.iter().find(|r| r.id == "q20").unwrap();
    assert_eq!(q20.structured_ok, Some(true));
    assert!(q20.note_chunks > 0);
    assert_eq!(run.traces.len(), 21);
    common::check_golden("fixture_report.json", &report.to_json().unwrap());
}

#[test]
fn item_order_and_parallelism_do_not_change_the_report() {
    let items = parse_dataset(fixtures::BENCHMARK_JSONL, DatasetProfile::Fixture).unwrap();
    let forward = fixture_run(&items, 1).report.to_json().unwrap();
    let mut reversed = items.clone();
    reversed.reverse();
    let mut rotated = items.clone();
    rotated.rotate_left(7);
    assert_eq!(forward, fixture_run(&reversed, 8).report.to_json().unwrap());
    assert_eq!(forward, fixture_run(&rotated, 3).report.to_json().unwrap());
}

#[test]
fn one_exhausted_script_costs_one_item() {
    let items = parse_dataset(fixtures::BENCHMARK_JSONL, DatasetProfile::Fixture).unwrap();
    let rules: Vec<_> = fixtures::script()
        .into_iter()
        .filter(|r| !(r.role_tag == RoleTag::AnswerSynthesizer && r.substring_pattern.contains("hemoglobin")))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let nav = fixtures::demo_navigator_with(FixtureDb::Mimic, dir.path(), ScriptedBackend::new(rules, 0.002)).unwrap();
    let report = run_benchmark(&items, &nav, &RunOptions::default()).report;
    assert_eq!((report.aggregates.correct, report.aggregates.items), (19, 20));
    assert_eq!(report.aggregates.errors, 1);
    let failed = report.items.iter().find(|r| r.error.is_some()).unwrap();
    assert_eq!(failed.id, "q08");
    assert_eq!(failed.error.as_ref().unwrap().class, "llm_script_exhausted");
    assert!(!failed.correct);
    report.verify().unwrap();
    assert!(report.summary_table().contains("accuracy: 19/20 (95.0%)"));
}

#[test]
fn gold_sql_timeouts_are_dropped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = FixtureDb::Mimic.materialize(dir.path()).unwrap();
    let db = Database::open("fixture", path).unwrap();
    let items = parse_dataset(fixtures::EHRSQL_JSON, DatasetProfile::Ehrsql).unwrap();
    let filtered = drop_gold_sql_timeouts(items, &db, Duration::from_millis(300));
    assert_eq!(filtered.dropped, ["e2"]);
    assert_eq!(filtered.kept.iter().map(|i| i.id()).collect::<Vec<_>>(), ["e1", "e3"]);
}

#[test]
fn ehrnoteqa_items_run_notes_only() {
    let items = parse_dataset(fixtures::EHRNOTEQA_JSONL, DatasetProfile::Ehrnoteqa).unwrap();
    let run = fixture_run(&items, 2);
    let report = &run.report;
    assert_eq!(report.warmup.tables_described, 0);
    for row in &report.items {
        assert_eq!(row.structured_ok, None);
        assert_eq!(row.fallback_mode, Some(true));
        assert!(row.rouge_l.f1 > 0.3, "{}: {}", row.id, row.rouge_l.f1);
    }
}
