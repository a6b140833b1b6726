//! Stage runners with files as the interchange between them.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! <model>/outputs.jsonl, descriptor_scores.jsonl, regen_names.jsonl,
//!         descriptions.jsonl, consistency.jsonl, fidelity.jsonl,
//!         semantic.jsonl, classifier.json, cells.json, *_errors.jsonl
//! <model>/renamed/...        same files for the renamed corpus
//! <model>/renamed/corpus/    manifest.json, functions.jsonl, provenance.json
//! report.{md,csv,json}, histogram.csv, manifests/<command>.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backend::{PassError, Session};
use crate::config::{MetricFamilies, RunConfig};
use crate::consistency::{consistency_for_app, ConsistencyRecord};
use crate::corpus::{load_corpus_with, Corpus, CorpusOptions};
use crate::error::{Error, Result};
use crate::fidelity::{build_app_document, fidelity_for_app, train_classifier, FidelityRecord};
use crate::jsonl;
use crate::prompt::{PromptTemplates, StructuredOutput};
use crate::rename::{
    apply_renames, build_rename_map, compute_copy_rate, edit_distance_histogram, exceeds_copy_threshold,
    rq2_delta, RenameMap, RenameOptions,
};
use crate::report::{
    consistency_cells, fidelity_cells, histogram_csv, output_histogram, render_report, semantic_cells,
    AggregateCell, DeltaCell, ReportFormat,
};
use crate::semantic::{generate_app_description, semantic_for_app, AppDescription, BleuOptions, SynonymTable};
use crate::text::sha256_hex;

pub const OUTPUTS: &str = "outputs.jsonl";
pub const ANNOTATE_ERRORS: &str = "annotate_errors.jsonl";
pub const DESCRIPTOR_SCORES: &str = "descriptor_scores.jsonl";
pub const DESCRIPTOR_ERRORS: &str = "descriptor_errors.jsonl";
pub const REGEN_NAMES: &str = "regen_names.jsonl";
pub const REGEN_ERRORS: &str = "regen_errors.jsonl";
pub const DESCRIPTIONS: &str = "descriptions.jsonl";
pub const DESCRIBE_ERRORS: &str = "describe_errors.jsonl";
pub const CONSISTENCY: &str = "consistency.jsonl";
pub const FIDELITY: &str = "fidelity.jsonl";
pub const SEMANTIC: &str = "semantic.jsonl";
pub const METRIC_ERRORS: &str = "metric_errors.jsonl";
pub const CLASSIFIER: &str = "classifier.json";
pub const CELLS: &str = "cells.json";
pub const RENAME_SUMMARY: &str = "rename_summary.json";
pub const RENAME_MAPS: &str = "rename_maps.jsonl";
pub const DELTAS: &str = "deltas.json";
pub const HISTOGRAM: &str = "histogram.csv";

/// What one stage did; collected into the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub model: String,
    pub row: String,
    pub records: usize,
    pub errors: usize,
    pub requests: usize,
    pub cache_hits: usize,
    /// Output file (relative to the output directory) to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub corpus_digest: String,
    pub seed: u64,
    pub models: Vec<String>,
    pub stages: Vec<StageSummary>,
    pub error_count: usize,
}

/// A per-app failure in the metrics stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricError {
    pub apk_id: String,
    pub metric: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenameSummary {
    pub model: String,
    pub copy_rate: f64,
    pub threshold: f64,
    pub excluded: bool,
    pub applied: usize,
    pub functions: usize,
    /// Edit distance between original and suggestion, over applied renames.
    pub edit_distances: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenameOutcome {
    pub summary: RenameSummary,
    pub stages: Vec<StageSummary>,
    pub deltas: Vec<DeltaCell>,
}

/// One model under one corpus condition (original or renamed).
#[derive(Debug, Clone)]
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub model: String,
    /// Row label in reports.
    pub row: String,
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub functions: PathBuf,
}

impl<'a> Run<'a> {
    pub fn original(cfg: &'a RunConfig, model: &str) -> Self {
        Self {
            cfg,
            model: model.to_string(),
            row: model.to_string(),
            dir: cfg.output_dir.join(model),
            manifest: cfg.corpus.manifest.clone(),
            functions: cfg.corpus.functions.clone(),
        }
    }

    pub fn renamed(cfg: &'a RunConfig, model: &str) -> Self {
        let dir = cfg.output_dir.join(model).join("renamed");
        Self {
            cfg,
            model: model.to_string(),
            row: format!("{model}+"),
            manifest: dir.join("corpus").join("manifest.json"),
            functions: dir.join("corpus").join("functions.jsonl"),
            dir,
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        load_corpus_with(
            &self.manifest,
            &self.functions,
            CorpusOptions { chars_per_token: self.cfg.corpus.chars_per_token },
        )
    }

    fn session(&self, backend_id: &str) -> Result<Session> {
        let templates = match &self.cfg.templates_dir {
            Some(dir) => PromptTemplates::load_dir(dir)?,
            None => PromptTemplates::default(),
        };
        Session::new(self.cfg.backend(backend_id)?.clone(), templates, self.cfg.cache_dir.clone())
    }

    fn summary(&self, stage: &str) -> StageSummary {
        StageSummary { stage: stage.into(), model: self.model.clone(), row: self.row.clone(), ..Default::default() }
    }

    /// Write `bytes` to `file` in the run directory and record its digest.
    fn emit(&self, summary: &mut StageSummary, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(file);
        jsonl::write_atomic(&path, bytes)?;
        let rel = path.strip_prefix(&self.cfg.output_dir).unwrap_or(&path);
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        summary.outputs.insert(key, sha256_hex(bytes));
        Ok(())
    }

    fn emit_jsonl<T: Serialize>(&self, summary: &mut StageSummary, file: &str, records: &[T]) -> Result<()> {
        self.emit(summary, file, jsonl::to_string(records)?.as_bytes())
    }

    fn emit_json<T: Serialize + ?Sized>(&self, summary: &mut StageSummary, file: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.emit(summary, file, &bytes)
    }

    fn read_outputs(&self) -> Result<Vec<StructuredOutput>> {
        jsonl::read(&self.path(OUTPUTS))
    }
}

/// Structured output per function.
pub fn annotate(run: &Run) -> Result<StageSummary> {
    let corpus = run.load_corpus()?;
    let session = run.session(&run.model)?;
    let pass = session.annotate(&corpus);
    let mut s = run.summary("annotate");
    s.records = pass.records.len();
    s.errors = pass.errors.len();
    s.requests = pass.stats.requests;
    s.cache_hits = pass.stats.cache_hits;
    run.emit_jsonl(&mut s, OUTPUTS, &pass.records)?;
    run.emit_jsonl(&mut s, ANNOTATE_ERRORS, &pass.errors)?;
    info!("{}: annotated {} functions, {} errors", run.row, s.records, s.errors);
    Ok(s)
}

/// Re-score each descriptor, on the configured scorer backend if any.
pub fn score_descriptors(run: &Run) -> Result<StageSummary> {
    let outputs = run.read_outputs()?;
    let scorer = run.cfg.scorer.clone().unwrap_or_else(|| run.model.clone());
    let pass = run.session(&scorer)?.score_descriptors(&outputs);
    let mut s = run.summary("score-descriptors");
    s.records = pass.records.len();
    s.errors = pass.errors.len();
    s.requests = pass.stats.requests;
    s.cache_hits = pass.stats.cache_hits;
    s.notes.push(format!("annotator {}, scorer {scorer}", run.model));
    run.emit_jsonl(&mut s, DESCRIPTOR_SCORES, &pass.records)?;
    run.emit_jsonl(&mut s, DESCRIPTOR_ERRORS, &pass.errors)?;
    Ok(s)
}

/// Ask the model for a name given only its own summary.
pub fn regen_names(run: &Run) -> Result<StageSummary> {
    let outputs = run.read_outputs()?;
    let pass = run.session(&run.model)?.regenerate_names(&outputs);
    let mut s = run.summary("regen-names");
    s.records = pass.records.len();
    s.errors = pass.errors.len();
    s.requests = pass.stats.requests;
    s.cache_hits = pass.stats.cache_hits;
    run.emit_jsonl(&mut s, REGEN_NAMES, &pass.records)?;
    run.emit_jsonl(&mut s, REGEN_ERRORS, &pass.errors)?;
    Ok(s)
}

/// App-purpose description per APK from its top-v outputs.
pub fn describe_apps(run: &Run) -> Result<StageSummary> {
    let corpus = run.load_corpus()?;
    let outputs = run.read_outputs()?;
    let session = run.session(&run.model)?;
    let calls_before = session.client.calls();
    let mut descriptions = Vec::new();
    let mut errors = Vec::new();
    for apk in corpus.apks.values() {
        match generate_app_description(&session, apk, &outputs) {
            Ok(d) => descriptions.push(d),
            Err(e) => errors.push(PassError {
                apk_id: apk.apk_id.clone(),
                function_id: String::new(),
                pass: "describe-apps".into(),
                kind: e.kind().into(),
                message: e.to_string(),
            }),
        }
    }
    let requests = session.client.calls() - calls_before;
    let cache_hits = if session.cache_dir.is_some() { descriptions.len().saturating_sub(requests) } else { 0 };
    let mut s = run.summary("describe-apps");
    s.records = descriptions.len();
    s.errors = errors.len();
    s.requests = requests;
    s.cache_hits = cache_hits;
    run.emit_jsonl(&mut s, DESCRIPTIONS, &descriptions)?;
    run.emit_jsonl(&mut s, DESCRIBE_ERRORS, &errors)?;
    Ok(s)
}

fn metric_error(apk_id: &str, metric: &str, e: &Error) -> MetricError {
    MetricError { apk_id: apk_id.into(), metric: metric.into(), kind: e.kind().into(), message: e.to_string() }
}

/// Per-app metric records for the selected families, plus aggregated cells.
pub fn metrics(run: &Run, families: MetricFamilies) -> Result<StageSummary> {
    let corpus = run.load_corpus()?;
    let outputs = run.read_outputs()?;
    let mut s = run.summary("metrics");
    let mut errors: Vec<MetricError> = Vec::new();
    let mut cells: Vec<AggregateCell> = Vec::new();

    if families.consistency {
        let scores = jsonl::read(&run.path(DESCRIPTOR_SCORES))?;
        let names = jsonl::read(&run.path(REGEN_NAMES))?;
        let mut records: Vec<ConsistencyRecord> = Vec::new();
        for apk in corpus.apks.values() {
            match consistency_for_app(apk, &outputs, &scores, &names) {
                Ok(r) => records.push(r),
                Err(e) => errors.push(metric_error(&apk.apk_id, "consistency", &e)),
            }
        }
        s.records += records.len();
        cells.extend(consistency_cells(&run.row, &records));
        run.emit_jsonl(&mut s, CONSISTENCY, &records)?;
    }

    if families.fidelity {
        let mut documents = Vec::new();
        let mut complete = Vec::new();
        for apk in corpus.apks.values() {
            match build_app_document(apk, &outputs) {
                Ok(d) => {
                    documents.push(d);
                    complete.push(apk);
                }
                Err(e) => errors.push(metric_error(&apk.apk_id, "fidelity", &e)),
            }
        }
        let classifier = train_classifier(&documents, &run.cfg.train_options())?;
        s.notes.push(format!("classifier held-out accuracy {:.4}", classifier.metadata.held_out_accuracy));
        run.emit_json(&mut s, CLASSIFIER, &classifier)?;
        let mut records: Vec<FidelityRecord> = Vec::new();
        for apk in complete {
            match fidelity_for_app(&classifier, apk, &outputs, &run.cfg.k, &run.model) {
                Ok(r) => {
                    for e in r.entries.iter().filter(|e| e.mfs.is_none()) {
                        let err = Error::ZeroConfidence { apk_id: apk.apk_id.clone() };
                        s.notes.push(format!("{} (k = {}) excluded from MFS", err, e.k));
                    }
                    records.push(r);
                }
                Err(e) => errors.push(metric_error(&apk.apk_id, "fidelity", &e)),
            }
        }
        s.records += records.len();
        cells.extend(fidelity_cells(&run.row, &records));
        run.emit_jsonl(&mut s, FIDELITY, &records)?;
    }

    if families.semantic {
        let descriptions: Vec<AppDescription> = jsonl::read(&run.path(DESCRIPTIONS))?;
        let synonyms = run.cfg.synonyms.as_deref().map(SynonymTable::load).transpose()?;
        let bleu_opts = BleuOptions { brevity_penalty: run.cfg.bleu_brevity_penalty, ..BleuOptions::default() };
        let mut records = Vec::new();
        for d in &descriptions {
            match semantic_for_app(d, bleu_opts, synonyms.as_ref()) {
                Ok(r) => records.push(r),
                Err(e) => errors.push(metric_error(&d.apk_id, "semantic", &e)),
            }
        }
        s.records += records.len();
        cells.extend(semantic_cells(&run.row, &records));
        run.emit_jsonl(&mut s, SEMANTIC, &records)?;
    }

    s.errors = errors.len();
    run.emit_jsonl(&mut s, METRIC_ERRORS, &errors)?;
    run.emit_json(&mut s, CELLS, &cells)?;
    Ok(s)
}

/// Every per-model stage in order. Stops at the first stage that fails.
pub fn run_all(run: &Run, families: MetricFamilies) -> Result<Vec<StageSummary>> {
    let mut stages = vec![annotate(run)?];
    if families.consistency {
        stages.push(score_descriptors(run)?);
        stages.push(regen_names(run)?);
    }
    if families.semantic {
        stages.push(describe_apps(run)?);
    }
    stages.push(metrics(run, families)?);
    Ok(stages)
}

/// Rewrite the corpus with the model's names and rerun the pipeline on it.
pub fn rename_experiment(cfg: &RunConfig, model: &str, families: MetricFamilies) -> Result<RenameOutcome> {
    let original = Run::original(cfg, model);
    let corpus = original.load_corpus()?;
    let outputs = original.read_outputs()?;
    let copy_rate = compute_copy_rate(&outputs, &corpus)?;
    let threshold = cfg.rename.copy_rate_threshold;
    let excluded = exceeds_copy_threshold(copy_rate, threshold);

    let maps: Vec<RenameMap> = corpus
        .apks
        .values()
        .map(|apk| build_rename_map(&corpus, apk, &outputs))
        .collect::<Result<_>>()?;
    let summary = RenameSummary {
        model: model.to_string(),
        copy_rate,
        threshold,
        excluded,
        applied: maps.iter().map(|m| m.applied().count()).sum(),
        functions: corpus.functions.len(),
        edit_distances: edit_distance_histogram(&maps),
    };
    let mut head = original.summary("rename-experiment");
    if excluded {
        head.notes.push(format!(
            "{model} excluded: copy rate {:.2}% exceeds threshold {:.2}%",
            copy_rate * 100.0,
            threshold * 100.0
        ));
        warn!("{}", head.notes[0]);
        original.emit_json(&mut head, RENAME_SUMMARY, &summary)?;
        return Ok(RenameOutcome { summary, stages: vec![head], deltas: vec![] });
    }

    let renamed = Run::renamed(cfg, model);
    let opts = RenameOptions { scope: cfg.rename.scope, chars_per_token: cfg.corpus.chars_per_token };
    let renamed_corpus = apply_renames(&corpus, &maps, opts)?;
    renamed.emit(&mut head, "corpus/manifest.json", renamed_corpus.manifest_string()?.as_bytes())?;
    renamed.emit(&mut head, "corpus/functions.jsonl", renamed_corpus.functions_string()?.as_bytes())?;
    let provenance = serde_json::json!({
        "derived_from": renamed_corpus.provenance.derived_from,
        "note": renamed_corpus.provenance.note,
        "model": model,
    });
    renamed.emit_json(&mut head, "corpus/provenance.json", &provenance)?;
    renamed.emit_jsonl(&mut head, RENAME_MAPS, &maps)?;
    head.records = summary.applied;

    let mut stages = vec![head];
    stages.extend(run_all(&renamed, families)?);
    let old: Vec<AggregateCell> = read_json(&original.path(CELLS))?;
    let new: Vec<AggregateCell> = read_json(&renamed.path(CELLS))?;
    let deltas = rq2_delta(&old, &new);
    let mut tail = renamed.summary("rename-deltas");
    tail.records = deltas.len();
    renamed.emit_json(&mut tail, DELTAS, &deltas)?;
    original.emit_json(&mut tail, RENAME_SUMMARY, &summary)?;
    stages.push(tail);
    Ok(RenameOutcome { summary, stages, deltas })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Table over every model with metric cells, renamed rows as deltas, and
/// score histograms per condition.
pub fn report(cfg: &RunConfig, format: ReportFormat) -> Result<StageSummary> {
    let mut cells = Vec::new();
    let mut deltas = Vec::new();
    let mut histograms = Vec::new();
    for model in cfg.model_ids() {
        let original = Run::original(cfg, &model);
        match read_json::<Vec<AggregateCell>>(&original.path(CELLS)) {
            Ok(c) => cells.extend(c),
            Err(e) => {
                warn!("{model}: no metric cells ({e}); run metrics first");
                continue;
            }
        }
        if let Ok(outputs) = original.read_outputs() {
            histograms.push(output_histogram(&outputs, &original.row));
        }
        let renamed = Run::renamed(cfg, &model);
        if let Ok(d) = read_json::<Vec<DeltaCell>>(&renamed.path(DELTAS)) {
            deltas.extend(d);
            if let Ok(outputs) = renamed.read_outputs() {
                histograms.push(output_histogram(&outputs, &renamed.row));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config(format!(
            "no metric cells under {}; run the metrics command first",
            cfg.output_dir.display()
        )));
    }
    let doc = render_report(&cells, &histograms, &deltas, format)?;
    let ext = match format {
        ReportFormat::Markdown => "md",
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    };
    let top = Run { dir: cfg.output_dir.clone(), ..Run::original(cfg, "") };
    let mut s = StageSummary { stage: "report".into(), records: cells.len() + deltas.len(), ..Default::default() };
    top.emit(&mut s, &format!("report.{ext}"), doc.as_bytes())?;
    top.emit(&mut s, HISTOGRAM, histogram_csv(&histograms).as_bytes())?;
    Ok(s)
}

/// Record what a command did under `output_dir/manifests/<command>.json`.
pub fn write_run_manifest(cfg: &RunConfig, command: &str, stages: &[StageSummary]) -> Result<RunManifest> {
    let corpus_digest = load_corpus_with(
        &cfg.corpus.manifest,
        &cfg.corpus.functions,
        CorpusOptions { chars_per_token: cfg.corpus.chars_per_token },
    )?
    .digest()?;
    let manifest = RunManifest {
        tool: "malbench".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config_digest: cfg.digest()?,
        corpus_digest,
        seed: cfg.seed,
        models: cfg.model_ids(),
        stages: stages.to_vec(),
        error_count: stages.iter().map(|s| s.errors).sum(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    jsonl::write_atomic(&cfg.output_dir.join("manifests").join(format!("{command}.json")), &bytes)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{planted_corpus, SynthOptions};

    fn setup(dir: &Path) -> RunConfig {
        let corpus = planted_corpus(SynthOptions { apks_per_category: 5, ..SynthOptions::default() }).unwrap();
        let (m, f) = (dir.join("manifest.json"), dir.join("functions.jsonl"));
        corpus.write(&m, &f).unwrap();
        let mut cfg = RunConfig::mock(m, f, dir.join("out"), "mock", 3);
        cfg.cache_dir = Some(dir.join("cache"));
        cfg
    }

    #[test]
    fn full_run_writes_every_stage_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let run = Run::original(&cfg, "mock");
        let stages = run_all(&run, MetricFamilies::default()).unwrap();
        assert_eq!(stages.iter().map(|s| s.errors).sum::<usize>(), 0);
        for f in [OUTPUTS, DESCRIPTOR_SCORES, REGEN_NAMES, DESCRIPTIONS, CONSISTENCY, FIDELITY, SEMANTIC, CLASSIFIER, CELLS] {
            assert!(run.path(f).exists(), "{f}");
        }
        let cells: Vec<AggregateCell> = read_json(&run.path(CELLS)).unwrap();
        let metrics: Vec<&str> = cells.iter().map(|c| c.metric.as_str()).collect();
        assert_eq!(metrics, ["mcs", "ncs", "mfs_2", "mfs_5", "mfs_8", "bleu", "meteor", "rouge_l"]);
        let s = report(&cfg, ReportFormat::Markdown).unwrap();
        assert!(s.outputs.contains_key("report.md"));
        let m = write_run_manifest(&cfg, "run", &stages).unwrap();
        assert_eq!(m.error_count, 0);
    }

    #[test]
    fn warm_cache_rerun_makes_no_requests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let run = Run::original(&cfg, "mock");
        let first = annotate(&run).unwrap();
        assert!(first.requests > 0);
        let second = annotate(&run).unwrap();
        assert_eq!(second.requests, 0);
        assert_eq!(second.outputs, first.outputs);
    }

    #[test]
    fn single_family_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let run = Run::original(&cfg, "mock");
        let fam = MetricFamilies::only("fidelity").unwrap();
        run_all(&run, fam).unwrap();
        assert!(run.path(FIDELITY).exists());
        assert!(!run.path(CONSISTENCY).exists() && !run.path(SEMANTIC).exists());
    }

    #[test]
    fn missing_inputs_fail() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let run = Run::original(&cfg, "mock");
        assert!(matches!(score_descriptors(&run), Err(Error::Io { .. })));
        assert!(matches!(report(&cfg, ReportFormat::Json), Err(Error::Config(_))));
    }
}
