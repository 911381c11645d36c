use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{BackendKind, ChatBackend, Completion, GatewayError, LlmRequest};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL of a chat-completions compatible server, e.g.
    /// `https://api.openai.com/v1`. `/chat/completions` is appended.
    pub base_url: String,
    /// Environment variable holding the bearer token. Empty disables the
    /// `Authorization` header (local servers).
    pub api_key_env: String,
    pub timeout: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(180),
        }
    }
}

pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    /// Reads the credential from the environment now, so a missing key is
    /// reported before any work starts.
    pub fn new(config: &HttpConfig) -> Result<Self, GatewayError> {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            let key = std::env::var(&config.api_key_env)
                .ok()
                .filter(|k| !k.trim().is_empty())
                .ok_or_else(|| GatewayError::AuthMissing(config.api_key_env.clone()))?;
            Some(key)
        };
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Ok(Self {
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            agent,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

/// Request body in the chat-completions schema: a single user message.
pub fn request_body(request: &LlmRequest) -> serde_json::Value {
    json!({
        "model": request.model,
        "messages": [{ "role": "user", "content": request.prompt }],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    })
}

impl ChatBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn send(&self, request: &LlmRequest) -> Result<Completion, GatewayError> {
        let mut call = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match call.send_json(request_body(request)) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                return Err(match status {
                    429 => GatewayError::RateLimited,
                    401 | 403 => GatewayError::AuthRejected(status),
                    500..=599 => GatewayError::Transport(format!("HTTP {status}")),
                    _ => GatewayError::Status {
                        status,
                        body: r.into_string().unwrap_or_default(),
                    },
                })
            }
            Err(ureq::Error::Transport(t)) => return Err(GatewayError::Transport(t.to_string())),
        };
        let parsed: ChatResponse = response
            .into_json()
            .map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::BadResponse("no message content".into()))?;
        let usage = parsed.usage.unwrap_or(Usage {
            prompt_tokens: 0,
            completion_tokens: 0,
        });
        Ok(Completion {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }
}
