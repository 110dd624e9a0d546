//! Live chat-completions client (OpenAI-compatible endpoint).
//!
//! Never exercised in CI; `describe` and `train` can select it manually. The
//! API credential is read from an environment variable whose *name* is
//! configured; the value itself is never logged.

use std::time::{Duration, Instant};

use serde::Deserialize;

use super::{CompletionClient, DialogueTranscript};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LiveClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Minimum spacing between requests (token bucket of depth one).
    pub min_request_interval: Duration,
}

impl Default for LiveClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            model: "gpt-4o".to_string(),
            api_key_env: "SKELREC_API_KEY".to_string(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            min_request_interval: Duration::from_secs(1),
        }
    }
}

pub struct LiveClient {
    config: LiveClientConfig,
    identity: String,
    http: reqwest::blocking::Client,
    last_request: std::sync::Mutex<Option<Instant>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl LiveClient {
    pub fn new(config: LiveClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let identity = format!("live:{}", config.model);
        Ok(Self {
            config,
            identity,
            http,
            last_request: std::sync::Mutex::new(None),
        })
    }

    fn api_key(&self) -> Result<String> {
        std::env::var(&self.config.api_key_env).map_err(|_| {
            Error::State(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))
        })
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().expect("rate limiter lock");
        if let Some(at) = *last {
            let elapsed = at.elapsed();
            if elapsed < self.config.min_request_interval {
                std::thread::sleep(self.config.min_request_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl CompletionClient for LiveClient {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn supports_history(&self) -> bool {
        true
    }

    fn complete(&self, history: &DialogueTranscript, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::Argument("prompt must be nonempty".into()));
        }
        let key = self.api_key()?;
        let mut messages = Vec::new();
        for (p, r) in &history.turns {
            messages.push(serde_json::json!({"role": "user", "content": p}));
            messages.push(serde_json::json!({"role": "assistant", "content": r}));
        }
        messages.push(serde_json::json!({"role": "user", "content": prompt}));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
        });

        let mut last_error = String::new();
        for attempt in 1..=self.config.max_retries.max(1) {
            self.throttle();
            let sent = self
                .http
                .post(&self.config.endpoint)
                .bearer_auth(&key)
                .json(&body)
                .send();
            match sent {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: ChatResponse = resp.json().map_err(|e| Error::Transport {
                        attempts: attempt,
                        message: format!("bad response body: {e}"),
                    })?;
                    let content = parsed
                        .choices
                        .first()
                        .map(|c| c.message.content.trim().to_string())
                        .unwrap_or_default();
                    if content.is_empty() {
                        return Err(Error::Transport {
                            attempts: attempt,
                            message: "empty completion".into(),
                        });
                    }
                    return Ok(content);
                }
                Ok(resp) => {
                    last_error = format!("http status {}", resp.status());
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
            if attempt < self.config.max_retries {
                std::thread::sleep(Duration::from_millis(250 * 2u64.pow(attempt - 1)));
            }
        }
        Err(Error::Transport {
            attempts: self.config.max_retries,
            message: last_error,
        })
    }
}
