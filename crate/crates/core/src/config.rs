//! Run configuration shared by every pipeline stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::error::{Error, Result};
use crate::fidelity::{TrainOptions, DEFAULT_KS, DESK_ACCURACY_GATE};
use crate::rename::{RenameScope, DEFAULT_COPY_RATE_THRESHOLD};
use crate::text::DEFAULT_CHARS_PER_TOKEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub manifest: PathBuf,
    pub functions: PathBuf,
    #[serde(default = "default_chars_per_token")]
    pub chars_per_token: usize,
}

fn default_chars_per_token() -> usize {
    DEFAULT_CHARS_PER_TOKEN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricFamilies {
    pub consistency: bool,
    pub fidelity: bool,
    pub semantic: bool,
}

impl Default for MetricFamilies {
    fn default() -> Self {
        Self { consistency: true, fidelity: true, semantic: true }
    }
}

impl MetricFamilies {
    pub fn only(name: &str) -> Result<Self> {
        let none = Self { consistency: false, fidelity: false, semantic: false };
        match name {
            "consistency" => Ok(Self { consistency: true, ..none }),
            "fidelity" => Ok(Self { fidelity: true, ..none }),
            "semantic" => Ok(Self { semantic: true, ..none }),
            other => Err(Error::Config(format!(
                "unknown metric family {other:?} (expected consistency, fidelity or semantic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub accuracy_gate: f64,
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            accuracy_gate: DESK_ACCURACY_GATE,
            train_fraction: t.train_fraction,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            l2: t.l2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenameConfig {
    pub copy_rate_threshold: f64,
    pub scope: RenameScope,
}

impl Default for RenameConfig {
    fn default() -> Self {
        Self { copy_rate_threshold: DEFAULT_COPY_RATE_THRESHOLD, scope: RenameScope::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusPaths,
    pub backends: Vec<BackendConfig>,
    /// Backends evaluated as models; empty means every backend but the scorer.
    #[serde(default)]
    pub models: Vec<String>,
    /// Backend for the descriptor-score pass; each model scores itself if unset.
    #[serde(default)]
    pub scorer: Option<String>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
    #[serde(default)]
    pub metrics: MetricFamilies,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub rename: RenameConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
    #[serde(default)]
    pub bleu_brevity_penalty: bool,
}

fn default_k() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

impl RunConfig {
    /// Minimal config over one mock backend; used by tests and `synth`.
    pub fn mock(manifest: PathBuf, functions: PathBuf, output_dir: PathBuf, backend_id: &str, seed: u64) -> Self {
        Self {
            corpus: CorpusPaths { manifest, functions, chars_per_token: DEFAULT_CHARS_PER_TOKEN },
            backends: vec![BackendConfig::mock(backend_id, 4096, seed)],
            models: vec![],
            scorer: None,
            cache_dir: None,
            output_dir,
            k: default_k(),
            metrics: MetricFamilies::default(),
            classifier: ClassifierConfig::default(),
            rename: RenameConfig::default(),
            seed,
            templates_dir: None,
            synonyms: None,
            bleu_brevity_penalty: false,
        }
    }

    /// Make relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.manifest);
        fix(&mut self.corpus.functions);
        fix(&mut self.output_dir);
        for p in [&mut self.cache_dir, &mut self.templates_dir, &mut self.synonyms].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backends.is_empty() {
            return Err(Error::Config("no backends configured".into()));
        }
        let mut ids = BTreeSet::new();
        for b in &self.backends {
            b.validate()?;
            if !ids.insert(b.backend_id.as_str()) {
                return Err(Error::Config(format!("duplicate backend_id {}", b.backend_id)));
            }
        }
        for id in self.models.iter().chain(&self.scorer) {
            if !ids.contains(id.as_str()) {
                return Err(Error::Config(format!("unknown backend {id:?}")));
            }
        }
        if self.model_ids().is_empty() {
            return Err(Error::Config("no models to evaluate".into()));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::Config("k values must be a non-empty list of positive integers".into()));
        }
        let c = &self.classifier;
        if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
            return Err(Error::Config("classifier.train_fraction must lie strictly between 0 and 1".into()));
        }
        if !(0.0..=1.0).contains(&c.accuracy_gate) {
            return Err(Error::Config("classifier.accuracy_gate must lie in [0, 1]".into()));
        }
        if self.corpus.chars_per_token == 0 {
            return Err(Error::Config("corpus.chars_per_token must be positive".into()));
        }
        Ok(())
    }

    /// Fail before any work when an input path is missing.
    pub fn check_inputs(&self) -> Result<()> {
        let mut required = vec![&self.corpus.manifest, &self.corpus.functions];
        required.extend(self.templates_dir.iter());
        required.extend(self.synonyms.iter());
        for p in required {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist")));
            }
        }
        Ok(())
    }

    pub fn model_ids(&self) -> Vec<String> {
        if !self.models.is_empty() {
            return self.models.clone();
        }
        self.backends
            .iter()
            .map(|b| b.backend_id.clone())
            .filter(|id| Some(id) != self.scorer.as_ref())
            .collect()
    }

    pub fn backend(&self, id: &str) -> Result<&BackendConfig> {
        self.backends
            .iter()
            .find(|b| b.backend_id == id)
            .ok_or_else(|| Error::Config(format!("unknown backend {id:?}")))
    }

    pub fn train_options(&self) -> TrainOptions {
        let c = &self.classifier;
        TrainOptions {
            seed: self.seed,
            train_fraction: c.train_fraction,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            l2: c.l2,
            accuracy_gate: c.accuracy_gate,
        }
    }

    /// Digest over everything that changes results; locations of inputs,
    /// outputs and the cache are left out.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.corpus.manifest = PathBuf::new();
        c.corpus.functions = PathBuf::new();
        c.output_dir = PathBuf::new();
        c.cache_dir = None;
        c.templates_dir = None;
        c.synonyms = None;
        Ok(crate::text::sha256_hex(&serde_json::to_vec(&c)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig::mock("m.json".into(), "f.jsonl".into(), "out".into(), "mock", 1)
    }

    #[test]
    fn defaults_and_validation() {
        let c = cfg();
        c.validate().unwrap();
        assert_eq!(c.k, vec![2, 5, 8]);
        assert_eq!(c.model_ids(), vec!["mock"]);
        let mut bad = c.clone();
        bad.k = vec![2, 0];
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.scorer = Some("nope".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scorer_is_not_a_model() {
        let mut c = cfg();
        c.backends.push(BackendConfig::mock("big", 8192, 2));
        c.scorer = Some("big".into());
        assert_eq!(c.model_ids(), vec!["mock"]);
    }

    #[test]
    fn digest_ignores_locations() {
        let a = cfg();
        let mut b = cfg();
        b.output_dir = "elsewhere".into();
        b.cache_dir = Some("cache".into());
        b.resolve_paths(Path::new("/tmp/x"));
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed = 2;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn missing_input_is_reported() {
        assert!(matches!(cfg().check_inputs(), Err(Error::Io { .. })));
    }

    #[test]
    fn family_selector() {
        let f = MetricFamilies::only("fidelity").unwrap();
        assert!(f.fidelity && !f.consistency && !f.semantic);
        assert!(MetricFamilies::only("speed").is_err());
    }
}
