use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde_json::{json, Value};

use super::{BackendConfig, API_KEY_ENV};
use crate::error::{Error, Result};

pub(super) struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(Error),
}

impl HttpTransport {
    pub(super) fn new(cfg: &BackendConfig) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build();
        let base = cfg.base_url.as_deref().unwrap_or("").trim_end_matches('/');
        Self {
            agent: ureq::Agent::new_with_config(config),
            url: format!("{base}/v1/chat/completions"),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    /// Returns the first choice's content and the number of attempts made.
    pub(super) fn chat(&self, cfg: &BackendConfig, system: &str, user: &str) -> Result<(String, u32)> {
        let body = json!({
            "model": cfg.model_name,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_response_tokens,
        });
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.attempt(&body) {
                Attempt::Done(content) => return Ok((content, attempt)),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => {
                    if attempt > cfg.max_retries {
                        return Err(Error::Transport(format!(
                            "{reason} (gave up after {attempt} attempts)"
                        )));
                    }
                    let delay = cfg.retry_base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    warn!("attempt {attempt} to {} failed: {reason}; retrying in {delay} ms", self.url);
                    thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        debug!("{} -> HTTP {status}", self.url);
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(Error::Transport(format!("HTTP {status}: {}", truncate(&text))));
        }
        match extract_content(&text) {
            Ok(c) => Attempt::Done(c),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// `choices[0].message.content` from a chat-completion response body.
pub(super) fn extract_content(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Protocol("missing choices[0].message.content".into()))
}
