//! Chat-completion client over HTTP.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::llm::{DecodeParams, LlmError, LlmProvider};

/// Concurrency and retry limits for a remote provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteLimits {
    pub max_parallel: usize,
    /// Retransmissions after the first attempt.
    pub retries: u32,
    /// Base backoff; the n-th retry waits `backoff_ms * 2^(n-1)`.
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl Default for RemoteLimits {
    fn default() -> Self {
        Self {
            max_parallel: 8,
            retries: 5,
            backoff_ms: 500,
            timeout_secs: default_timeout(),
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("lock") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(LlmError),
}

/// An OpenAI-compatible chat-completion endpoint.
pub struct RemoteLlm {
    endpoint: String,
    model: String,
    secret: String,
    limits: RemoteLimits,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl RemoteLlm {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        secret: impl Into<String>,
        limits: RemoteLimits,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(limits.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            secret: secret.into(),
            in_flight: Semaphore::new(limits.max_parallel),
            limits,
            client,
        })
    }

    fn attempt(&self, prompt: &str, params: &DecodeParams) -> Attempt {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
        });
        if let Some(max) = params.max_tokens {
            body["max_tokens"] = json!(max);
        }
        let _permit = self.in_flight.acquire();
        let resp = match self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.secret)
            .json(&body)
            .send()
        {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status.as_u16() {
            200..=299 => match serde_json::from_str::<ChatResponse>(&text) {
                Ok(r) => match r.choices.into_iter().next().and_then(|c| c.message.content) {
                    Some(content) => Attempt::Done(content),
                    None => Attempt::Fatal(LlmError::MalformedResponse(
                        "no choices[0].message.content".into(),
                    )),
                },
                Err(e) => Attempt::Fatal(LlmError::MalformedResponse(format!("{e}: {text}"))),
            },
            401 | 403 => Attempt::Fatal(LlmError::Auth(text)),
            408 | 429 => Attempt::Retry(format!("HTTP {status}: {text}")),
            s if s >= 500 => Attempt::Retry(format!("HTTP {status}: {text}")),
            s => Attempt::Fatal(LlmError::Rejected { status: s, body: text }),
        }
    }
}

impl LlmProvider for RemoteLlm {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, LlmError> {
        let mut last = String::new();
        for attempt in 0..=self.limits.retries {
            if attempt > 0 {
                let wait = self.limits.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(prompt, params) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    warn!(attempt, endpoint = %self.endpoint, "transient LLM failure: {msg}");
                    last = msg;
                }
            }
        }
        Err(LlmError::Transport {
            attempts: self.limits.retries + 1,
            message: last,
        })
    }
}

/// Create a remote provider.
pub fn remote_llm(
    endpoint: &str,
    model: &str,
    secret: &str,
    limits: RemoteLimits,
) -> Result<RemoteLlm, LlmError> {
    RemoteLlm::new(endpoint, model, secret, limits)
}
