//! Step-level trace recording and the clocks that time it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::model::{AgentRole, TraceRecord, TraceStep};
use crate::text;

/// Millisecond clock used for every latency figure in a trace.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;

    /// Accounts for work that happened outside this process and reported
    /// its own duration (a backend call). Real clocks already observed the
    /// time, so the default does nothing.
    fn account(&self, _ms: u64) {}
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Clock that only moves when backend latency is accounted. Scripted runs
/// use it so that reports are byte-identical across runs.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn account(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

/// Collects the steps of one question's run.
pub struct TraceRecorder {
    question_id: String,
    clock: Arc<dyn Clock>,
    started_ms: u64,
    steps: Mutex<Vec<TraceStep>>,
}

impl TraceRecorder {
    pub fn new(question_id: impl Into<String>, clock: Arc<dyn Clock>) -> Self {
        let started_ms = clock.now_ms();
        Self { question_id: question_id.into(), clock, started_ms, steps: Mutex::new(Vec::new()) }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn record(&self, step: TraceStep) {
        self.steps.lock().expect("trace lock poisoned").push(step);
    }

    /// Records a non-LLM tool step that started at `started_ms`.
    pub fn record_tool(&self, agent: AgentRole, tool: &str, input: &str, output: &str, started_ms: u64) {
        let wall_ms = self.now_ms().saturating_sub(started_ms);
        self.record(TraceStep {
            agent,
            tool: tool.to_owned(),
            input_digest: text::digest(input),
            output_digest: text::digest(output),
            wall_ms,
            prompt_tokens: 0,
            completion_tokens: 0,
            cost: 0.0,
        });
    }

    pub fn steps(&self) -> Vec<TraceStep> {
        self.steps.lock().expect("trace lock poisoned").clone()
    }

    pub fn snapshot(&self, trace_id: impl Into<String>) -> TraceRecord {
        let total = self.now_ms().saturating_sub(self.started_ms);
        TraceRecord::from_steps(trace_id, self.question_id.clone(), self.steps(), total)
    }
}
