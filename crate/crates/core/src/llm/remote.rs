use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{approx_tokens, ChatBackend, ChatRequest, ChatResponse, LlmError};

/// Connection settings for an OpenAI-style `/chat/completions` endpoint.
/// The credential is read from the environment variable named in
/// `api_key_env`, never stored in config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub cost_per_1k_tokens: f64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    300
}

pub struct RemoteChatBackend {
    config: RemoteChatConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl RemoteChatBackend {
    pub fn new(config: RemoteChatConfig) -> Result<Self, LlmError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| LlmError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent, api_key })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }
}

impl ChatBackend for RemoteChatBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.config.model)
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let started = Instant::now();
        let mut call = self.agent.post(&self.url());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let payload: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Transport(format!("status {status}: {e}")))?;
        if !status.is_success() {
            return Err(LlmError::Transport(format!("status {status}: {payload}")));
        }
        let text = payload["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Transport("response has no choices[0].message.content".into()))?
            .to_owned();
        let usage = &payload["usage"];
        let prompt_tokens = usage["prompt_tokens"].as_u64().unwrap_or_else(|| approx_tokens(&request.rendered_prompt));
        let completion_tokens = usage["completion_tokens"].as_u64().unwrap_or_else(|| approx_tokens(&text));
        Ok(ChatResponse {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
            cost: (prompt_tokens + completion_tokens) as f64 / 1000.0 * self.config.cost_per_1k_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::RoleTag;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned HTTP response and returns the request body it saw.
    fn one_shot_server(reply: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            String::from_utf8(body).unwrap()
        });
        (format!("http://{addr}/v1"), handle)
    }

    #[test]
    fn speaks_chat_completion_contract() {
        let (endpoint, server) = one_shot_server(
            r#"{"choices":[{"message":{"role":"assistant","content":"SELECT 1"}}],"usage":{"prompt_tokens":1000,"completion_tokens":1000}}"#,
        );
        let backend = RemoteChatBackend::new(RemoteChatConfig {
            endpoint,
            model: "test-model".into(),
            api_key_env: None,
            cost_per_1k_tokens: 0.25,
            timeout_s: 10,
        })
        .unwrap();
        let req = ChatRequest {
            role_tag: RoleTag::SqlWriter,
            rendered_prompt: "write sql".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
        };
        let resp = backend.complete(&req).unwrap();
        assert_eq!(resp.text, "SELECT 1");
        assert_eq!(resp.cost, 0.5);
        let sent: Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["max_tokens"], 1024);
        assert_eq!(sent["messages"][0]["content"], "write sql");
    }

    #[test]
    fn missing_credential_variable_is_config_error() {
        let err = RemoteChatBackend::new(RemoteChatConfig {
            endpoint: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key_env: Some("EHRNAV_TEST_SURELY_UNSET_KEY".into()),
            cost_per_1k_tokens: 0.0,
            timeout_s: 1,
        })
        .err()
        .unwrap();
        assert!(matches!(err, LlmError::Config(_)));
    }
}
