//! Chat-completion backends, prompt templates and per-call accounting.
//!
//! Every model call in the pipeline goes through [`Gateway::complete`], which
//! counts the call per role and writes exactly one trace step for it.
//! Retries of transport failures are a gateway setting (default 0); retries
//! after bad SQL belong to the structured pipeline.

mod prompt;
mod remote;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompt::{PromptSet, PromptTemplate};
pub use remote::{RemoteChatBackend, RemoteChatConfig};
pub use scripted::{ScriptRule, ScriptTokens, ScriptedBackend};

use crate::model::{AgentRole, TraceStep};
use crate::text;
use crate::trace::TraceRecorder;

/// Tool name recorded for every model call.
pub const CHAT_TOOL: &str = "chat_completion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    TableReviewer,
    SqlWriter,
    AnswerSynthesizer,
    NoteQa,
}

impl RoleTag {
    pub const ALL: [RoleTag; 4] = [Self::TableReviewer, Self::SqlWriter, Self::AnswerSynthesizer, Self::NoteQa];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn agent(self) -> AgentRole {
        match self {
            Self::TableReviewer => AgentRole::TableReviewer,
            Self::SqlWriter => AgentRole::SqlWriter,
            Self::AnswerSynthesizer => AgentRole::AnswerSynthesizer,
            Self::NoteQa => AgentRole::NoteQa,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TableReviewer => "table_reviewer",
            Self::SqlWriter => "sql_writer",
            Self::AnswerSynthesizer => "answer_synthesizer",
            Self::NoteQa => "note_qa",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub rendered_prompt: String,
    pub temperature: f32,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub cost: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no script rule matches role `{role}` (prompt digest {prompt_digest})")]
    ScriptExhausted { role: RoleTag, prompt_digest: String },
    #[error("template `{template}` is missing bindings for: {}", missing.join(", "))]
    MissingPlaceholders { template: String, missing: Vec<String> },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// A chat-completion backend: one rendered prompt in, one text reply out.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// Word count used when a backend does not report token usage.
pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySettings {
    pub max_output_tokens: u32,
    pub transport_retries: u32,
    /// Non-zero sampling temperature, honored only when set. Pipeline runs
    /// are always greedy otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experimental_temperature: Option<f32>,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self { max_output_tokens: 1024, transport_retries: 0, experimental_temperature: None }
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    prompts: PromptSet,
    settings: GatewaySettings,
    calls: [AtomicU64; 4],
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, prompts: PromptSet, settings: GatewaySettings) -> Self {
        Self { backend, prompts, settings, calls: Default::default() }
    }

    pub fn with_defaults(backend: Arc<dyn ChatBackend>) -> Self {
        Self::new(backend, PromptSet::builtin(), GatewaySettings::default())
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn request(&self, role: RoleTag, prompt: String) -> ChatRequest {
        ChatRequest {
            role_tag: role,
            rendered_prompt: prompt,
            temperature: self.settings.experimental_temperature.unwrap_or(0.0),
            max_output_tokens: self.settings.max_output_tokens,
        }
    }

    /// Runs one model call and records it as a trace step, whether it
    /// succeeds or not.
    pub fn complete(&self, request: &ChatRequest, trace: &TraceRecorder) -> Result<ChatResponse, LlmError> {
        if request.temperature != 0.0 && self.settings.experimental_temperature.is_none() {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} requires experimental mode",
                request.temperature
            )));
        }
        self.calls[request.role_tag.slot()].fetch_add(1, Ordering::SeqCst);
        let started = trace.now_ms();
        let mut result = self.backend.complete(request);
        let mut retries = 0;
        while matches!(result, Err(LlmError::Transport(_))) && retries < self.settings.transport_retries {
            retries += 1;
            tracing::warn!(role = %request.role_tag, retries, "retrying chat transport failure");
            result = self.backend.complete(request);
        }
        let step = match &result {
            Ok(resp) => {
                trace.clock().account(resp.latency_ms);
                TraceStep {
                    agent: request.role_tag.agent(),
                    tool: CHAT_TOOL.to_owned(),
                    input_digest: text::digest(&request.rendered_prompt),
                    output_digest: text::digest(&resp.text),
                    wall_ms: trace.now_ms().saturating_sub(started),
                    prompt_tokens: resp.prompt_tokens,
                    completion_tokens: resp.completion_tokens,
                    cost: resp.cost,
                }
            }
            Err(e) => TraceStep {
                agent: request.role_tag.agent(),
                tool: CHAT_TOOL.to_owned(),
                input_digest: text::digest(&request.rendered_prompt),
                output_digest: text::digest(&format!("error: {e}")),
                wall_ms: trace.now_ms().saturating_sub(started),
                prompt_tokens: 0,
                completion_tokens: 0,
                cost: 0.0,
            },
        };
        trace.record(step);
        result
    }

    /// Number of `complete` invocations for `role` since construction or the
    /// last [`Gateway::reset_counts`].
    pub fn call_count(&self, role: RoleTag) -> u64 {
        self.calls[role.slot()].load(Ordering::SeqCst)
    }

    pub fn reset_counts(&self) {
        for c in &self.calls {
            c.store(0, Ordering::SeqCst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::VirtualClock;

    fn rule(role: RoleTag, pattern: &str, reply: &str) -> ScriptRule {
        ScriptRule {
            role_tag: role,
            substring_pattern: pattern.into(),
            reply_text: reply.into(),
            latency_ms: 25,
            tokens: None,
        }
    }

    fn recorder() -> TraceRecorder {
        TraceRecorder::new("q", Arc::new(VirtualClock::new()))
    }

    #[test]
    fn counts_start_at_zero_and_track_calls() {
        let backend = ScriptedBackend::new(vec![rule(RoleTag::TableReviewer, "Table", "desc")], 0.0);
        let gw = Gateway::with_defaults(Arc::new(backend));
        assert_eq!(gw.call_count(RoleTag::TableReviewer), 0);
        let trace = recorder();
        for _ in 0..3 {
            let req = gw.request(RoleTag::TableReviewer, "Table Name: x".into());
            gw.complete(&req, &trace).unwrap();
        }
        assert_eq!(gw.call_count(RoleTag::TableReviewer), 3);
        assert_eq!(gw.call_count(RoleTag::SqlWriter), 0);
        gw.reset_counts();
        assert_eq!(gw.call_count(RoleTag::TableReviewer), 0);
    }

    #[test]
    fn every_call_is_one_trace_step_even_on_failure() {
        let backend = ScriptedBackend::new(vec![rule(RoleTag::SqlWriter, "aspirin", "SELECT 1")], 0.0);
        let gw = Gateway::with_defaults(Arc::new(backend));
        let trace = recorder();
        let ok = gw.request(RoleTag::SqlWriter, "last aspirin dose".into());
        gw.complete(&ok, &trace).unwrap();
        let bad = gw.request(RoleTag::AnswerSynthesizer, "anything".into());
        assert!(matches!(gw.complete(&bad, &trace), Err(LlmError::ScriptExhausted { .. })));
        let t = trace.snapshot("t");
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.llm_calls(), 2);
        assert_eq!(t.steps[0].wall_ms, 25);
        assert_eq!(t.total_latency_ms, 25);
    }

    #[test]
    fn nonzero_temperature_needs_experimental_mode() {
        let backend = ScriptedBackend::new(vec![rule(RoleTag::SqlWriter, "", "x")], 0.0);
        let gw = Gateway::with_defaults(Arc::new(backend));
        let mut req = gw.request(RoleTag::SqlWriter, "p".into());
        assert_eq!(req.temperature, 0.0);
        req.temperature = 0.7;
        assert!(matches!(gw.complete(&req, &recorder()), Err(LlmError::InvalidRequest(_))));
    }

    struct Flaky {
        failures_left: std::sync::Mutex<u32>,
    }

    impl ChatBackend for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }

        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, LlmError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(LlmError::Transport("connection reset".into()));
            }
            Ok(ChatResponse { text: "ok".into(), prompt_tokens: 1, completion_tokens: 1, latency_ms: 0, cost: 0.0 })
        }
    }

    #[test]
    fn transport_retries_default_to_zero() {
        let gw = Gateway::with_defaults(Arc::new(Flaky { failures_left: 1.into() }));
        let req = gw.request(RoleTag::SqlWriter, "p".into());
        assert!(matches!(gw.complete(&req, &recorder()), Err(LlmError::Transport(_))));

        let settings = GatewaySettings { transport_retries: 2, ..Default::default() };
        let gw = Gateway::new(Arc::new(Flaky { failures_left: 2.into() }), PromptSet::builtin(), settings);
        assert_eq!(gw.complete(&req, &recorder()).unwrap().text, "ok");
        assert_eq!(gw.call_count(RoleTag::SqlWriter), 1);
    }
}
