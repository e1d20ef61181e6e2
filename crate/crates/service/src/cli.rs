//! `ehrnav` command line: `ask`, `eval`, `describe-schema`, `serve`.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use ehrnav_core::eval::{drop_gold_sql_timeouts, load_dataset, run_benchmark, RunOptions};
use ehrnav_core::{DatasetProfile, Modality};

use crate::ask::{ask, AskError, AskRequest, AskResponse};
use crate::config::{DatabaseSection, LlmBackendKind, ServiceConfig};
use crate::http::{serve, App};
use crate::registry::Registry;
use crate::schema::{render_schema, schema_view};
use crate::store::TraceStore;

/// Exit code for configuration, I/O and other infrastructure failures.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "ehrnav", version, about = "Question answering over structured EHR tables and clinical notes")]
pub struct Cli {
    /// TOML config file. Values from EHRNAV_* variables override it; flags
    /// override both.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one question and print the answer with its evidence.
    Ask(AskArgs),
    /// Run a benchmark file and write a report.
    Eval(EvalArgs),
    /// Describe every table of a database and print the schema.
    DescribeSchema(DescribeArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// LLM backend.
    #[arg(long, value_name = "scripted|remote")]
    pub backend: Option<LlmBackendKind>,
    /// Scripted transcript (JSONL or JSON array); the bundled demo script
    /// by default.
    #[arg(long, value_name = "FILE")]
    pub script: Option<PathBuf>,
    #[arg(long, value_name = "URL")]
    pub llm_endpoint: Option<String>,
    #[arg(long, value_name = "NAME")]
    pub llm_model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, value_name = "VAR")]
    pub llm_api_key_env: Option<String>,
    /// Directory of prompt template overrides (`<name>.txt`).
    #[arg(long, value_name = "DIR")]
    pub prompts_dir: Option<PathBuf>,
    /// Persistent table description cache (JSONL).
    #[arg(long, value_name = "FILE")]
    pub description_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DbArgs {
    /// `fixture`, `fixture-omop`, or a SQLite file.
    #[arg(long, value_name = "DB")]
    pub db: String,
    /// Dataset profile; required for SQLite files.
    #[arg(long, value_name = "PROFILE")]
    pub profile: Option<DatasetProfile>,
    /// Clinical notes (JSONL).
    #[arg(long, value_name = "FILE")]
    pub notes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[command(flatten)]
    pub db: DbArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, value_name = "ID")]
    pub patient: Option<String>,
    #[arg(long, value_name = "ID")]
    pub admission: Option<String>,
    #[arg(long, value_name = "structured|unstructured|multimodal", value_parser = parse_modality)]
    pub modality: Option<Modality>,
    /// Print the response as JSON.
    #[arg(long)]
    pub json: bool,
    /// Write the full trace (also of a failed run) to this file.
    #[arg(long, value_name = "FILE")]
    pub trace_out: Option<PathBuf>,
    #[arg(required = true, num_args = 1.., value_name = "QUESTION")]
    pub question: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub db: DbArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Report file (JSON).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Dataset label in the report header; the profile name by default.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    /// Drop items whose gold SQL exceeds the gold timeout before running.
    #[arg(long)]
    pub drop_gold_timeouts: bool,
    /// Gold SQL time limit in seconds; the executor timeout by default.
    #[arg(long, value_name = "SECONDS")]
    pub gold_timeout_s: Option<f64>,
    /// JSONL of `{"id", "verdict"}` reviewer verdicts to apply.
    #[arg(long, value_name = "FILE")]
    pub verdicts: Option<PathBuf>,
    /// Write every item trace (JSONL).
    #[arg(long, value_name = "FILE")]
    pub traces_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub db: DbArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Show cached descriptions only; never call the model.
    #[arg(long)]
    pub cached_only: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<std::net::SocketAddr>,
    /// Databases to register (`fixture`, `fixture-omop`); replaces the
    /// config file's list. SQLite files go in the config file.
    #[arg(long, value_name = "DB")]
    pub db: Vec<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown modality `{s}` (expected structured, unstructured or multimodal)"))
}

impl BackendArgs {
    fn apply(&self, config: &mut ServiceConfig) {
        if let Some(b) = self.backend {
            config.llm.backend = b;
        }
        let set = |slot: &mut Option<String>, v: &Option<String>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut config.llm.endpoint, &self.llm_endpoint);
        set(&mut config.llm.model, &self.llm_model);
        set(&mut config.llm.api_key_env, &self.llm_api_key_env);
        if self.script.is_some() {
            config.llm.script.clone_from(&self.script);
        }
        if self.prompts_dir.is_some() {
            config.prompts_dir.clone_from(&self.prompts_dir);
        }
        if self.description_cache.is_some() {
            config.description_cache.clone_from(&self.description_cache);
        }
    }
}

impl DbArgs {
    fn section(&self) -> DatabaseSection {
        DatabaseSection { id: None, source: self.db.clone(), profile: self.profile, notes: self.notes.clone() }
    }
}

fn fail(message: impl std::fmt::Display) -> i32 {
    eprintln!("error: {message}");
    EXIT_FAILURE
}

fn build(config_path: Option<&PathBuf>, adjust: impl FnOnce(&mut ServiceConfig)) -> Result<(ServiceConfig, Registry), String> {
    let mut config = ServiceConfig::load(config_path.map(PathBuf::as_path)).map_err(|e| e.to_string())?;
    adjust(&mut config);
    let registry = Registry::build(&config).map_err(|e| e.to_string())?;
    Ok((config, registry))
}

fn open_traces(config: &ServiceConfig) -> Result<TraceStore, String> {
    match &config.trace_store {
        Some(p) => TraceStore::open(p).map_err(|e| format!("trace store {}: {e}", p.display())),
        None => Ok(TraceStore::in_memory()),
    }
}

/// Text printed by `ehrnav ask`.
pub fn render_answer(r: &AskResponse) -> String {
    let mut out = format!("Answer: {}\n", r.answer.response_section.trim());
    let notes = r.answer.notes_evidence_section.trim();
    if !notes.is_empty() {
        out.push_str(&format!("Notes evidence: {notes}\n"));
    }
    let e = &r.evidence;
    if e.insufficient_evidence {
        out.push_str("Evidence: insufficient (no rows and no note chunks)\n");
    }
    out.push_str(&format!("\nDatabase: {} ({}, {})\n", r.db, r.profile, serde_plain(&r.modality)));
    match (&e.structured, &e.structured_failure) {
        (Some(s), _) => {
            out.push_str(&format!("SQL ({} attempt{}): {}\n", s.attempt_count, plural(s.attempt_count as usize), s.sql));
            out.push_str(&format!("Rows: {} [{}]\n", s.row_count, s.columns.join(", ")));
        }
        (None, Some(reason)) => {
            out.push_str(&format!("SQL: gave up after {} attempt{}: {reason}\n", e.sql_attempts, plural(e.sql_attempts as usize)));
        }
        (None, None) => out.push_str("SQL: not run\n"),
    }
    match &e.notes {
        Some(n) => {
            let mode = if n.fallback_mode { ", fallback mode" } else { "" };
            out.push_str(&format!("Note chunks: {} of k={}{mode}\n", n.chunks.len(), n.k_used));
            for c in &n.chunks {
                out.push_str(&format!("  {}  {}  {:.4}\n", c.key, c.timestamp, c.score));
            }
        }
        None => out.push_str("Note chunks: not retrieved\n"),
    }
    out.push_str(&format!("Trace: {}\n", r.trace_id));
    out
}

fn plural(n: usize) -> &'static str {
    if n == 1 {
        ""
    } else {
        "s"
    }
}

fn serde_plain<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

fn write_json(path: &PathBuf, value: &impl serde::Serialize) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run_ask(config_path: Option<&PathBuf>, args: AskArgs) -> i32 {
    let (config, registry) = match build(config_path, |c| {
        args.backend.apply(c);
        c.databases = vec![args.db.section()];
    }) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let traces = match open_traces(&config) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let req = AskRequest {
        question: args.question.join(" "),
        patient_scope: args.patient,
        admission_scope: args.admission,
        profile: None,
        modality: args.modality,
    };
    let trace_id = uuid::Uuid::new_v4().to_string();
    let result = ask(&registry, &traces, &req, &trace_id);
    if let Some(path) = &args.trace_out {
        if let Some(t) = traces.get(&trace_id) {
            if let Err(e) = write_json(path, t.as_ref()) {
                return fail(e);
            }
        }
    }
    match result {
        Ok(resp) => {
            let text = if args.json {
                match serde_json::to_string_pretty(&resp) {
                    Ok(s) => s + "\n",
                    Err(e) => return fail(e),
                }
            } else {
                render_answer(&resp)
            };
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return EXIT_FAILURE;
            }
            0
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.class());
            if let AskError::Backend { trace, .. } = &e {
                let last = trace.steps.last().map(|s| format!(", last {}/{}", serde_plain(&s.agent), s.tool)).unwrap_or_default();
                eprintln!("partial trace {}: {} step{}{last}", trace.trace_id, trace.steps.len(), plural(trace.steps.len()));
            }
            e.exit_code()
        }
    }
}

fn run_eval(config_path: Option<&PathBuf>, args: EvalArgs) -> i32 {
    let Some(profile) = args.db.profile.or_else(|| args.db.section().resolved_profile()) else {
        return fail("--profile is required");
    };
    let (config, registry) = match build(config_path, |c| {
        args.backend.apply(c);
        c.databases = vec![DatabaseSection { profile: Some(profile), ..args.db.section() }];
    }) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let entry = &registry.entries()[0];
    let nav = &entry.navigator;
    let mut items = match load_dataset(&args.dataset, profile) {
        Ok(i) => i,
        Err(e) => return fail(format!("{}: {e}", args.dataset.display())),
    };
    let mut dropped = Vec::new();
    if args.drop_gold_timeouts {
        let limit = Duration::from_secs_f64(args.gold_timeout_s.unwrap_or(config.pipeline.timeout_s));
        let db = nav.database().expect("registered navigators have a database");
        let filtered = drop_gold_sql_timeouts(items, db, limit);
        items = filtered.kept;
        dropped = filtered.dropped;
    }
    let options = RunOptions {
        dataset: args.label.clone().unwrap_or_else(|| profile.to_string()),
        parallelism: args.parallelism,
        dropped_gold_sql_timeouts: dropped,
    };
    let run = run_benchmark(&items, nav, &options);
    let mut report = run.report;
    if let Some(path) = &args.verdicts {
        let applied = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))
            .and_then(|src| report.apply_verdicts(&src).map_err(|e| e.to_string()));
        match applied {
            Ok(n) => eprintln!("applied {n} verdicts from {}", path.display()),
            Err(e) => return fail(e),
        }
    }
    if let Err(e) = report.write(&args.out) {
        return fail(format!("{}: {e}", args.out.display()));
    }
    let traces = match open_traces(&config) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    for t in &run.traces {
        if let Err(e) = traces.append(t.clone()) {
            return fail(format!("trace store: {e}"));
        }
    }
    if let Some(path) = &args.traces_out {
        let mut lines = String::new();
        for t in &run.traces {
            match serde_json::to_string(t) {
                Ok(s) => {
                    lines.push_str(&s);
                    lines.push('\n');
                }
                Err(e) => return fail(e),
            }
        }
        if let Err(e) = std::fs::write(path, lines) {
            return fail(format!("{}: {e}", path.display()));
        }
    }
    println!("{}", report.accuracy_line());
    print!("{}", report.summary_table());
    0
}

fn run_describe(config_path: Option<&PathBuf>, args: DescribeArgs) -> i32 {
    let (_, registry) = match build(config_path, |c| {
        args.backend.apply(c);
        c.databases = vec![args.db.section()];
    }) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let entry = &registry.entries()[0];
    if !args.cached_only {
        let trace = entry.navigator.new_trace("describe-schema");
        if let Err(e) = entry.navigator.warm_descriptions(&trace) {
            eprintln!("error: describing tables: {e}");
            return 4;
        }
    }
    let view = match schema_view(entry) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if args.json {
        match serde_json::to_string_pretty(&view) {
            Ok(s) => println!("{s}"),
            Err(e) => return fail(e),
        }
    } else {
        print!("{}", render_schema(&view));
    }
    0
}

fn run_serve(config_path: Option<&PathBuf>, args: ServeArgs) -> i32 {
    let (config, registry) = match build(config_path, |c| {
        args.backend.apply(c);
        if let Some(b) = args.bind {
            c.bind = b;
        }
        if !args.db.is_empty() {
            c.databases = args
                .db
                .iter()
                .map(|d| DatabaseSection { id: None, source: d.clone(), profile: None, notes: None })
                .collect();
        }
        if c.databases.is_empty() {
            tracing::info!("no databases configured; serving the bundled fixture");
            c.databases.push(DatabaseSection { id: None, source: "fixture".into(), profile: None, notes: None });
        }
    }) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let traces = match open_traces(&config) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    for e in registry.entries() {
        tracing::info!(db = %e.id, profile = %e.profile, "registered database");
    }
    let app = App::new(registry, traces, config.workers);
    match runtime.block_on(serve(app, config.bind)) {
        Ok(()) => 0,
        Err(e) => fail(format!("serve on {}: {e}", config.bind)),
    }
}

/// Parses `std::env::args` and runs the command. Returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let config = cli.config.as_ref();
    match cli.command {
        Command::Ask(a) => run_ask(config, a),
        Command::Eval(a) => run_eval(config, a),
        Command::DescribeSchema(a) => run_describe(config, a),
        Command::Serve(a) => run_serve(config, a),
    }
}
