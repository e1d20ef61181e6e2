use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{approx_tokens, ChatBackend, ChatRequest, ChatResponse, LlmError, RoleTag};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTokens {
    pub prompt: u64,
    pub completion: u64,
}

/// One scripted reply. Rules sharing a `(role_tag, substring_pattern)` key
/// are replayed in file order; the last one in a key repeats once the
/// earlier ones are used up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub role_tag: RoleTag,
    #[serde(alias = "pattern")]
    pub substring_pattern: String,
    pub reply_text: String,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<ScriptTokens>,
}

#[derive(Debug)]
struct RuleGroup {
    role: RoleTag,
    pattern: String,
    replies: Vec<ScriptRule>,
}

/// Deterministic offline backend driven by a script of [`ScriptRule`]s.
///
/// A request is served by the first key (in order of first appearance) whose
/// role matches and whose pattern occurs in the rendered prompt.
#[derive(Debug)]
pub struct ScriptedBackend {
    groups: Vec<RuleGroup>,
    cursors: Mutex<Vec<usize>>,
    cost_per_1k_tokens: f64,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, cost_per_1k_tokens: f64) -> Self {
        let mut groups: Vec<RuleGroup> = Vec::new();
        for rule in rules {
            match groups
                .iter_mut()
                .find(|g| g.role == rule.role_tag && g.pattern == rule.substring_pattern)
            {
                Some(g) => g.replies.push(rule),
                None => groups.push(RuleGroup {
                    role: rule.role_tag,
                    pattern: rule.substring_pattern.clone(),
                    replies: vec![rule],
                }),
            }
        }
        let cursors = Mutex::new(vec![0; groups.len()]);
        Self { groups, cursors, cost_per_1k_tokens }
    }

    /// Parses a script: either a JSON array of rules or one rule per line.
    pub fn parse(source: &str) -> Result<Vec<ScriptRule>, LlmError> {
        let trimmed = source.trim_start();
        if trimmed.starts_with('[') {
            return serde_json::from_str(trimmed).map_err(|e| LlmError::Config(format!("script: {e}")));
        }
        crate::model::read_jsonl(source.as_bytes()).map_err(|e| LlmError::Config(format!("script: {e}")))
    }

    pub fn from_file(path: &Path, cost_per_1k_tokens: f64) -> Result<Self, LlmError> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("script {}: {e}", path.display())))?;
        Ok(Self::new(Self::parse(&source)?, cost_per_1k_tokens))
    }

    /// Rewinds every key to its first reply.
    pub fn reset(&self) {
        self.cursors.lock().expect("script lock poisoned").iter_mut().for_each(|c| *c = 0);
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let slot = self
            .groups
            .iter()
            .position(|g| g.role == request.role_tag && request.rendered_prompt.contains(&g.pattern))
            .ok_or_else(|| LlmError::ScriptExhausted {
                role: request.role_tag,
                prompt_digest: text::digest(&request.rendered_prompt),
            })?;
        let group = &self.groups[slot];
        let rule = {
            let mut cursors = self.cursors.lock().expect("script lock poisoned");
            let idx = cursors[slot].min(group.replies.len() - 1);
            cursors[slot] += 1;
            &group.replies[idx]
        };
        let (prompt_tokens, completion_tokens) = match rule.tokens {
            Some(t) => (t.prompt, t.completion),
            None => (approx_tokens(&request.rendered_prompt), approx_tokens(&rule.reply_text)),
        };
        let cost = (prompt_tokens + completion_tokens) as f64 / 1000.0 * self.cost_per_1k_tokens;
        Ok(ChatResponse {
            text: rule.reply_text.clone(),
            prompt_tokens,
            completion_tokens,
            latency_ms: rule.latency_ms,
            cost,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(role: RoleTag, prompt: &str) -> ChatRequest {
        ChatRequest { role_tag: role, rendered_prompt: prompt.into(), temperature: 0.0, max_output_tokens: 1024 }
    }

    fn rule(role: RoleTag, pattern: &str, reply: &str, latency_ms: u64) -> ScriptRule {
        ScriptRule { role_tag: role, substring_pattern: pattern.into(), reply_text: reply.into(), latency_ms, tokens: None }
    }

    #[test]
    fn matching_rule_is_replayed_with_scripted_latency() {
        let sql = "SELECT dose_val_rx FROM prescriptions WHERE drug LIKE '%aspirin%'";
        let b = ScriptedBackend::new(vec![rule(RoleTag::SqlWriter, "aspirin", sql, 120)], 0.0);
        let r = b.complete(&req(RoleTag::SqlWriter, "Question: last aspirin dose")).unwrap();
        assert_eq!(r.text, sql);
        assert_eq!(r.latency_ms, 120);
    }

    #[test]
    fn repeated_request_is_byte_identical() {
        let b = ScriptedBackend::new(vec![rule(RoleTag::SqlWriter, "aspirin", "SELECT 1", 5)], 2.0);
        let a = b.complete(&req(RoleTag::SqlWriter, "aspirin?")).unwrap();
        let c = b.complete(&req(RoleTag::SqlWriter, "aspirin?")).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn unmatched_role_is_exhaustion() {
        let b = ScriptedBackend::new(vec![rule(RoleTag::SqlWriter, "aspirin", "SELECT 1", 0)], 0.0);
        let err = b.complete(&req(RoleTag::TableReviewer, "aspirin")).unwrap_err();
        assert!(matches!(err, LlmError::ScriptExhausted { role: RoleTag::TableReviewer, .. }));
    }

    #[test]
    fn same_key_rules_replay_in_order_then_repeat_last() {
        let b = ScriptedBackend::new(
            vec![
                rule(RoleTag::SqlWriter, "q", "first", 0),
                rule(RoleTag::SqlWriter, "q", "second", 0),
            ],
            0.0,
        );
        let texts: Vec<String> = (0..3).map(|_| b.complete(&req(RoleTag::SqlWriter, "q")).unwrap().text).collect();
        assert_eq!(texts, ["first", "second", "second"]);
        b.reset();
        assert_eq!(b.complete(&req(RoleTag::SqlWriter, "q")).unwrap().text, "first");
    }

    #[test]
    fn cost_follows_token_counts() {
        let mut r = rule(RoleTag::NoteQa, "", "a b", 0);
        r.tokens = Some(ScriptTokens { prompt: 900, completion: 100 });
        let b = ScriptedBackend::new(vec![r], 0.5);
        let resp = b.complete(&req(RoleTag::NoteQa, "x")).unwrap();
        assert_eq!(resp.cost, 0.5);
        assert_eq!((resp.prompt_tokens, resp.completion_tokens), (900, 100));
    }

    #[test]
    fn parses_array_and_line_formats() {
        let line = r#"{"role_tag":"sql_writer","substring_pattern":"x","reply_text":"SELECT 1","latency_ms":3}"#;
        let arr = format!("[{line}]");
        assert_eq!(ScriptedBackend::parse(line).unwrap(), ScriptedBackend::parse(&arr).unwrap());
        let alias = r#"{"role_tag":"note_qa","pattern":"y","reply_text":"z"}"#;
        assert_eq!(ScriptedBackend::parse(alias).unwrap()[0].substring_pattern, "y");
    }
}
