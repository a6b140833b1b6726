//! Completion backends: an HTTP chat-completion client and a seeded mock,
//! behind one [`Client`] with a content-addressed response cache.

mod cache;
mod http;
pub mod mock;
mod passes;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptText;
use crate::text::sha256_hex;

pub use cache::{cache_entry_path, CacheEntry};
pub use mock::MockModel;
pub use passes::{
    annotate_corpus, BatchStats, DescriptorScore, PassError, PassRun, RegeneratedName, Session,
};

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "CAMA_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub backend_id: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    pub model_name: String,
    pub context_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_response_tokens")]
    pub max_response_tokens: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retry_base_delay_ms")]
    pub retry_base_delay_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_response_tokens() -> usize {
    512
}
fn default_max_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_retry_base_delay_ms() -> u64 {
    500
}
fn default_timeout_secs() -> u64 {
    120
}

impl BackendConfig {
    pub fn mock(backend_id: &str, context_tokens: usize, seed: u64) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::Mock,
            base_url: None,
            model_name: format!("mock-{backend_id}"),
            context_tokens,
            temperature: 0.0,
            max_response_tokens: default_max_response_tokens(),
            max_retries: default_max_retries(),
            parallelism: default_parallelism(),
            seed,
            retry_base_delay_ms: default_retry_base_delay_ms(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend_id.trim().is_empty() {
            return Err(Error::Config("backend_id is empty".into()));
        }
        if self.max_response_tokens == 0 || self.context_tokens <= self.max_response_tokens {
            return Err(Error::Config(format!(
                "backend {}: context_tokens ({}) must exceed max_response_tokens ({})",
                self.backend_id, self.context_tokens, self.max_response_tokens
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::Config(format!("backend {}: parallelism is 0", self.backend_id)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config(format!("backend {}: negative temperature", self.backend_id)));
        }
        if self.kind == BackendKind::Http && self.base_url.as_deref().unwrap_or("").is_empty() {
            return Err(Error::Config(format!("backend {}: http needs base_url", self.backend_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub response: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    pub attempts: u32,
}

/// Content hash over everything that can change a response.
pub fn prompt_hash(cfg: &BackendConfig, prompt: &PromptText) -> String {
    let mut buf = Vec::new();
    for part in [
        cfg.backend_id.as_bytes(),
        cfg.model_name.as_bytes(),
        format!("{:016x}", cfg.temperature.to_bits()).as_bytes(),
        prompt.text.as_bytes(),
    ] {
        buf.extend_from_slice(&(part.len() as u64).to_le_bytes());
        buf.extend_from_slice(part);
    }
    sha256_hex(&buf)
}

enum Transport {
    Http(http::HttpTransport),
    Mock(MockModel),
}

/// A configured backend. Safe to share across threads.
pub struct Client {
    cfg: BackendConfig,
    system_prompt: String,
    transport: Transport,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl Client {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        Self::with_system_prompt(cfg, crate::prompt::PromptTemplates::default().role_context)
    }

    pub fn with_system_prompt(cfg: BackendConfig, system_prompt: String) -> Result<Self> {
        cfg.validate()?;
        let transport = match cfg.kind {
            BackendKind::Mock => Transport::Mock(MockModel::new(cfg.seed)),
            BackendKind::Http => Transport::Http(http::HttpTransport::new(&cfg)),
        };
        Ok(Self {
            cfg,
            system_prompt,
            transport,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// Requests that reached the model (cache hits excluded).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn complete(&self, prompt: &PromptText) -> Result<CompletionRecord> {
        let needed = prompt.token_estimate + self.cfg.max_response_tokens;
        if needed > self.cfg.context_tokens {
            return Err(Error::BudgetExceeded { needed, context: self.cfg.context_tokens });
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let start = Instant::now();
        let result = match &self.transport {
            Transport::Mock(m) => Ok((m.respond(prompt), 1)),
            Transport::Http(h) => h.chat(&self.cfg, &self.system_prompt, &prompt.text),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        let (response, attempts) = result?;
        Ok(CompletionRecord {
            prompt_hash: prompt_hash(&self.cfg, prompt),
            response,
            latency_ms: start.elapsed().as_millis() as u64,
            from_cache: false,
            attempts,
        })
    }

    /// Serve from `cache_dir` when possible, otherwise complete and persist.
    pub fn complete_cached(&self, prompt: &PromptText, cache_dir: &Path) -> Result<CompletionRecord> {
        let hash = prompt_hash(&self.cfg, prompt);
        if let Some(entry) = cache::lookup(cache_dir, &hash) {
            return Ok(CompletionRecord {
                prompt_hash: hash,
                response: entry.response,
                latency_ms: 0,
                from_cache: true,
                attempts: 0,
            });
        }
        let record = self.complete(prompt)?;
        cache::store(cache_dir, &self.cfg, &record)?;
        Ok(record)
    }

    pub fn complete_maybe_cached(
        &self,
        prompt: &PromptText,
        cache_dir: Option<&Path>,
    ) -> Result<CompletionRecord> {
        match cache_dir {
            Some(dir) => self.complete_cached(prompt, dir),
            None => self.complete(prompt),
        }
    }
}

pub fn complete(cfg: &BackendConfig, prompt: &PromptText) -> Result<CompletionRecord> {
    Client::new(cfg.clone())?.complete(prompt)
}

pub fn complete_cached(
    cfg: &BackendConfig,
    prompt: &PromptText,
    cache_dir: &Path,
) -> Result<CompletionRecord> {
    Client::new(cfg.clone())?.complete_cached(prompt, cache_dir)
}
