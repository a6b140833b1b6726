//! Per-function prompting passes fanned out over a bounded worker pool.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{BackendConfig, Client, CompletionRecord};
use crate::corpus::{Corpus, FunctionKey};
use crate::error::{Error, Result};
use crate::prompt::{
    parse_name_response, parse_score_response, parse_structured_output, PromptBuilder,
    PromptTemplates, PromptText, StructuredOutput,
};

/// `M_des(f)` from the descriptor-score pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorScore {
    pub apk_id: String,
    pub function_id: String,
    /// Model whose descriptor was scored.
    pub model_id: String,
    /// Backend that produced the score; may differ from `model_id`.
    pub scorer_id: String,
    pub score: f64,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// `N_reg(f)` from the name-regeneration pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegeneratedName {
    pub apk_id: String,
    pub function_id: String,
    pub model_id: String,
    pub backend_id: String,
    pub name: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// A function whose pass failed; recorded instead of dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassError {
    pub apk_id: String,
    pub function_id: String,
    pub pass: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Requests that reached the backend.
    pub requests: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassRun<T> {
    /// Sorted by `(apk_id, function_id)`.
    pub records: Vec<T>,
    pub errors: Vec<PassError>,
    pub stats: BatchStats,
}

pub struct Session {
    pub client: Client,
    pub builder: PromptBuilder,
    pub cache_dir: Option<PathBuf>,
}

impl Session {
    pub fn new(cfg: BackendConfig, templates: PromptTemplates, cache_dir: Option<PathBuf>) -> Result<Self> {
        let mut builder = PromptBuilder::new(cfg.context_tokens, cfg.max_response_tokens);
        builder.templates = templates.clone();
        let client = Client::with_system_prompt(cfg, templates.role_context)?;
        Ok(Self { client, builder, cache_dir })
    }

    pub fn backend_id(&self) -> &str {
        &self.client.config().backend_id
    }

    pub fn complete(&self, prompt: &PromptText) -> Result<CompletionRecord> {
        self.client.complete_maybe_cached(prompt, self.cache_dir.as_deref())
    }

    /// Complete every job with at most `parallelism` requests in flight.
    /// Output order follows the sorted keys, not completion order.
    fn run_batch(
        &self,
        mut jobs: Vec<(FunctionKey, Result<PromptText>)>,
    ) -> (Vec<(FunctionKey, Result<CompletionRecord>)>, BatchStats) {
        jobs.sort_by(|a, b| a.0.cmp(&b.0));
        let calls_before = self.client.calls();
        let slots: Vec<Mutex<Option<Result<CompletionRecord>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.client.config().parallelism.min(jobs.len()).max(1);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((_, prompt)) = jobs.get(i) else { break };
                    let result = match prompt {
                        Ok(p) => self.complete(p),
                        Err(e) => Err(clone_error(e)),
                    };
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        let mut cache_hits = 0;
        let results: Vec<_> = jobs
            .into_iter()
            .zip(slots)
            .map(|((key, _), slot)| {
                let r = slot.into_inner().expect("slot lock").expect("every job ran");
                if matches!(&r, Ok(c) if c.from_cache) {
                    cache_hits += 1;
                }
                (key, r)
            })
            .collect();
        let stats = BatchStats { requests: self.client.calls() - calls_before, cache_hits };
        (results, stats)
    }

    /// One structured output per function of the corpus.
    pub fn annotate(&self, corpus: &Corpus) -> PassRun<StructuredOutput> {
        let cfg = self.client.config();
        let jobs = corpus
            .functions
            .iter()
            .map(|(key, f)| {
                let prompt = self.builder.build_function_prompt(f).map_err(|e| match e {
                    Error::CodeTooLong { estimate, .. } => Error::BudgetExceeded {
                        needed: estimate + cfg.max_response_tokens,
                        context: cfg.context_tokens,
                    },
                    other => other,
                });
                (key.clone(), prompt)
            })
            .collect();
        let model_id = self.backend_id().to_string();
        self.collect("annotate", jobs, |key, c| {
            parse_structured_output(&c.response, key, &model_id)
        })
    }

    /// `M_des` for each output, via the descriptor-score prompt.
    pub fn score_descriptors(&self, outputs: &[StructuredOutput]) -> PassRun<DescriptorScore> {
        let jobs = outputs
            .iter()
            .map(|o| (o.key(), Ok(self.builder.build_descriptor_score_prompt(&o.descriptor()))))
            .collect();
        let models = model_lookup(outputs);
        let scorer = self.backend_id().to_string();
        self.collect("score-descriptors", jobs, |key, c| {
            let (score, warnings) = parse_score_response(&c.response)?;
            Ok(DescriptorScore {
                apk_id: key.apk_id.clone(),
                function_id: key.function_id.clone(),
                model_id: models(key),
                scorer_id: scorer.clone(),
                score,
                raw_response: c.response.clone(),
                warnings,
            })
        })
    }

    /// `N_reg` for each output, re-prompting with its own summary.
    pub fn regenerate_names(&self, outputs: &[StructuredOutput]) -> PassRun<RegeneratedName> {
        let jobs = outputs
            .iter()
            .map(|o| (o.key(), Ok(self.builder.build_name_regen_prompt(&o.summary))))
            .collect();
        let models = model_lookup(outputs);
        let backend = self.backend_id().to_string();
        self.collect("regen-names", jobs, |key, c| {
            let (name, warnings) = parse_name_response(&c.response)?;
            Ok(RegeneratedName {
                apk_id: key.apk_id.clone(),
                function_id: key.function_id.clone(),
                model_id: models(key),
                backend_id: backend.clone(),
                name,
                raw_response: c.response.clone(),
                warnings,
            })
        })
    }

    fn collect<T>(
        &self,
        pass: &str,
        jobs: Vec<(FunctionKey, Result<PromptText>)>,
        parse: impl Fn(&FunctionKey, &CompletionRecord) -> Result<T>,
    ) -> PassRun<T> {
        let (results, stats) = self.run_batch(jobs);
        let mut records = Vec::new();
        let mut errors = Vec::new();
        for (key, result) in results {
            match result.and_then(|c| parse(&key, &c)) {
                Ok(r) => records.push(r),
                Err(e) => errors.push(PassError {
                    apk_id: key.apk_id,
                    function_id: key.function_id,
                    pass: pass.to_string(),
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        PassRun { records, errors, stats }
    }
}

fn model_lookup(outputs: &[StructuredOutput]) -> impl Fn(&FunctionKey) -> String {
    let map: std::collections::BTreeMap<FunctionKey, String> =
        outputs.iter().map(|o| (o.key(), o.model_id.clone())).collect();
    move |k| map.get(k).cloned().unwrap_or_default()
}

// Errors are not Clone (io::Error); re-create the pass-relevant variants.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::BudgetExceeded { needed, context } => {
            Error::BudgetExceeded { needed: *needed, context: *context }
        }
        Error::CodeTooLong { estimate, budget } => {
            Error::CodeTooLong { estimate: *estimate, budget: *budget }
        }
        other => Error::Protocol(other.to_string()),
    }
}

/// Annotate a corpus with a fresh session over the default templates.
pub fn annotate_corpus(
    cfg: &BackendConfig,
    corpus: &Corpus,
    cache_dir: Option<&Path>,
) -> Result<PassRun<StructuredOutput>> {
    let session = Session::new(cfg.clone(), PromptTemplates::default(), cache_dir.map(Path::to_path_buf))?;
    Ok(session.annotate(corpus))
}
