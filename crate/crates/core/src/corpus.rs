//! Decompiled-function corpus: loading, validation, de-duplication, stats.
//!
//! A corpus is two files. The manifest is a JSON array with one object per
//! APK; the functions file is JSON Lines with one decompiled method per line.
//! Everything is kept in `BTreeMap`s so iteration order is the sorted key
//! order, which every downstream stage relies on for reproducibility.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::text::{estimate_tokens, sha256_hex, DEFAULT_CHARS_PER_TOKEN};

/// One manifest row, in canonical field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub apk_id: String,
    pub category: String,
    pub family: String,
    pub size_bytes: u64,
    pub method_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_description: Option<String>,
}

/// One functions-file line, in canonical field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionLine {
    pub apk_id: String,
    pub function_id: String,
    pub class_name: String,
    pub method_name: String,
    pub signature: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApkSample {
    pub apk_id: String,
    pub category: String,
    pub family: String,
    pub size_bytes: u64,
    pub method_count: u64,
    /// Sorted function keys within this APK.
    pub function_ids: Vec<String>,
    pub reference_description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub function_id: String,
    pub apk_id: String,
    pub class_name: String,
    pub original_name: String,
    pub signature: String,
    pub code: String,
    pub token_estimate: usize,
}

/// Functions are unique per APK, so the global key is the pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionKey {
    pub apk_id: String,
    pub function_id: String,
}

impl FunctionKey {
    pub fn new(apk_id: impl Into<String>, function_id: impl Into<String>) -> Self {
        Self { apk_id: apk_id.into(), function_id: function_id.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest_path: Option<PathBuf>,
    pub functions_path: Option<PathBuf>,
    pub loaded_at_unix: u64,
    /// Digest of the corpus this one was derived from (renaming, dedupe).
    pub derived_from: Option<String>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusOptions {
    pub chars_per_token: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self { chars_per_token: DEFAULT_CHARS_PER_TOKEN }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub apks: BTreeMap<String, ApkSample>,
    pub functions: BTreeMap<FunctionKey, FunctionRecord>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub apks: usize,
    pub categories: usize,
    pub families: usize,
    pub functions: usize,
}

pub fn load_corpus(manifest_path: &Path, functions_path: &Path) -> Result<Corpus> {
    load_corpus_with(manifest_path, functions_path, CorpusOptions::default())
}

pub fn load_corpus_with(
    manifest_path: &Path,
    functions_path: &Path,
    opts: CorpusOptions,
) -> Result<Corpus> {
    let manifest_text =
        fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let functions_text =
        fs::read_to_string(functions_path).map_err(|e| Error::io(functions_path, e))?;
    let manifest = parse_manifest(&manifest_text)?;
    let functions: Vec<FunctionLine> = jsonl::parse(&functions_text)?;
    let mut corpus = Corpus::from_records(manifest, functions, opts)?;
    corpus.provenance = Provenance {
        manifest_path: Some(manifest_path.to_path_buf()),
        functions_path: Some(functions_path.to_path_buf()),
        loaded_at_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        derived_from: None,
        note: None,
    };
    Ok(corpus)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
        line: e.line(),
        reason: format!("manifest: {e}"),
    })
}

impl Corpus {
    pub fn empty() -> Self {
        Self { apks: BTreeMap::new(), functions: BTreeMap::new(), provenance: Provenance::default() }
    }

    /// Validate and assemble a corpus from already-parsed records.
    ///
    /// Record numbers in `MalformedRecord` are 1-based positions in the
    /// respective input (manifest entry index or functions-file line).
    pub fn from_records(
        manifest: Vec<ManifestEntry>,
        functions: Vec<FunctionLine>,
        opts: CorpusOptions,
    ) -> Result<Self> {
        let mut apks = BTreeMap::new();
        for (idx, entry) in manifest.into_iter().enumerate() {
            for (name, value) in [
                ("apk_id", &entry.apk_id),
                ("category", &entry.category),
                ("family", &entry.family),
            ] {
                if value.trim().is_empty() {
                    return Err(Error::MalformedRecord {
                        line: idx + 1,
                        reason: format!("manifest entry has empty {name}"),
                    });
                }
            }
            if apks.contains_key(&entry.apk_id) {
                return Err(Error::DuplicateKey(format!("apk_id {}", entry.apk_id)));
            }
            apks.insert(
                entry.apk_id.clone(),
                ApkSample {
                    apk_id: entry.apk_id,
                    category: entry.category,
                    family: entry.family,
                    size_bytes: entry.size_bytes,
                    method_count: entry.method_count,
                    function_ids: Vec::new(),
                    reference_description: entry.reference_description,
                },
            );
        }

        let mut records = BTreeMap::new();
        for (idx, line) in functions.into_iter().enumerate() {
            if line.function_id.is_empty() {
                return Err(Error::MalformedRecord {
                    line: idx + 1,
                    reason: "empty function_id".into(),
                });
            }
            if line.code.is_empty() {
                return Err(Error::MalformedRecord {
                    line: idx + 1,
                    reason: format!("function {} has empty code", line.function_id),
                });
            }
            if !apks.contains_key(&line.apk_id) {
                return Err(Error::DanglingFunction { apk_id: line.apk_id });
            }
            let key = FunctionKey::new(&line.apk_id, &line.function_id);
            if records.contains_key(&key) {
                return Err(Error::DuplicateKey(format!(
                    "function {} in apk {}",
                    key.function_id, key.apk_id
                )));
            }
            let token_estimate = estimate_tokens(&line.code, opts.chars_per_token);
            records.insert(
                key,
                FunctionRecord {
                    function_id: line.function_id,
                    apk_id: line.apk_id,
                    class_name: line.class_name,
                    original_name: line.method_name,
                    signature: line.signature,
                    code: line.code,
                    token_estimate,
                },
            );
        }

        if records.is_empty() && !apks.is_empty() {
            warn!("functions file is empty; {} apks loaded without functions", apks.len());
        }
        for key in records.keys() {
            if let Some(apk) = apks.get_mut(&key.apk_id) {
                apk.function_ids.push(key.function_id.clone());
            }
        }
        for apk in apks.values_mut() {
            let loaded = apk.function_ids.len() as u64;
            if apk.method_count != loaded {
                warn!(
                    "apk {}: manifest method_count {} but {} functions loaded; using loaded count",
                    apk.apk_id, apk.method_count, loaded
                );
                apk.method_count = loaded;
            }
        }

        Ok(Self { apks, functions: records, provenance: Provenance::default() })
    }

    pub fn apk(&self, apk_id: &str) -> Option<&ApkSample> {
        self.apks.get(apk_id)
    }

    pub fn function(&self, apk_id: &str, function_id: &str) -> Option<&FunctionRecord> {
        self.functions.get(&FunctionKey::new(apk_id, function_id))
    }

    /// Functions of one APK in sorted `function_id` order.
    pub fn functions_of<'a>(&'a self, apk_id: &'a str) -> impl Iterator<Item = &'a FunctionRecord> {
        self.apks
            .get(apk_id)
            .into_iter()
            .flat_map(|apk| apk.function_ids.iter())
            .filter_map(move |fid| self.function(apk_id, fid))
    }

    pub fn manifest_entries(&self) -> Vec<ManifestEntry> {
        self.apks
            .values()
            .map(|a| ManifestEntry {
                apk_id: a.apk_id.clone(),
                category: a.category.clone(),
                family: a.family.clone(),
                size_bytes: a.size_bytes,
                method_count: a.method_count,
                reference_description: a.reference_description.clone(),
            })
            .collect()
    }

    pub fn function_lines(&self) -> Vec<FunctionLine> {
        self.functions
            .values()
            .map(|f| FunctionLine {
                apk_id: f.apk_id.clone(),
                function_id: f.function_id.clone(),
                class_name: f.class_name.clone(),
                method_name: f.original_name.clone(),
                signature: f.signature.clone(),
                code: f.code.clone(),
            })
            .collect()
    }

    pub fn manifest_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.manifest_entries())?;
        s.push('\n');
        Ok(s)
    }

    pub fn functions_string(&self) -> Result<String> {
        jsonl::to_string(&self.function_lines())
    }

    /// Content digest over the canonical serialization.
    pub fn digest(&self) -> Result<String> {
        let mut bytes = self.manifest_string()?.into_bytes();
        bytes.push(0);
        bytes.extend_from_slice(self.functions_string()?.as_bytes());
        Ok(sha256_hex(&bytes))
    }

    pub fn write(&self, manifest_path: &Path, functions_path: &Path) -> Result<()> {
        jsonl::write_atomic(manifest_path, self.manifest_string()?.as_bytes())?;
        jsonl::write_atomic(functions_path, self.functions_string()?.as_bytes())
    }

    /// Keep only the given APKs (and their functions).
    pub fn retain_apks(&self, keep: &BTreeSet<String>) -> Corpus {
        Corpus {
            apks: self
                .apks
                .iter()
                .filter(|(k, _)| keep.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            functions: self
                .functions
                .iter()
                .filter(|(k, _)| keep.contains(&k.apk_id))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Category-wise de-duplication on exact `(size_bytes, method_count)`.
pub fn dedupe_category_wise(corpus: &Corpus) -> Corpus {
    dedupe_category_wise_bucketed(corpus, 0)
}

/// As [`dedupe_category_wise`], with sizes compared after integer division
/// by `size_bucket_bytes` (0 means exact comparison).
pub fn dedupe_category_wise_bucketed(corpus: &Corpus, size_bucket_bytes: u64) -> Corpus {
    let mut seen: BTreeSet<(&str, u64, u64)> = BTreeSet::new();
    let mut keep = BTreeSet::new();
    // apks iterate in ascending apk_id, so the first hit is the survivor
    for apk in corpus.apks.values() {
        let bucket = apk.size_bytes.checked_div(size_bucket_bytes).unwrap_or(apk.size_bytes);
        if seen.insert((apk.category.as_str(), bucket, apk.method_count)) {
            keep.insert(apk.apk_id.clone());
        }
    }
    let dropped = corpus.apks.len() - keep.len();
    if dropped > 0 {
        log::info!("dedupe removed {dropped} apks");
    }
    let mut out = corpus.retain_apks(&keep);
    if dropped > 0 {
        out.provenance.derived_from = corpus.digest().ok();
        out.provenance.note = Some(format!("category-wise dedupe removed {dropped} apks"));
    }
    out
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let categories: BTreeSet<&str> = corpus.apks.values().map(|a| a.category.as_str()).collect();
    let families: BTreeSet<&str> = corpus.apks.values().map(|a| a.family.as_str()).collect();
    CorpusStats {
        apks: corpus.apks.len(),
        categories: categories.len(),
        families: families.len(),
        functions: corpus.apks.values().map(|a| a.function_ids.len()).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn entry(id: &str, cat: &str, size: u64, methods: u64) -> ManifestEntry {
        ManifestEntry {
            apk_id: id.into(),
            category: cat.into(),
            family: format!("{cat}-fam"),
            size_bytes: size,
            method_count: methods,
            reference_description: None,
        }
    }

    fn line(apk: &str, fid: &str) -> FunctionLine {
        FunctionLine {
            apk_id: apk.into(),
            function_id: fid.into(),
            class_name: "com.example.A".into(),
            method_name: format!("m{fid}"),
            signature: "()V".into(),
            code: format!("void m{fid}() {{ return; }}"),
        }
    }

    fn two_apk_fixture() -> Corpus {
        let manifest = vec![entry("apk-b", "Trojan", 100, 4), entry("apk-a", "Adware", 50, 3)];
        let mut funcs = Vec::new();
        for f in ["f3", "f1", "f2"] {
            funcs.push(line("apk-a", f));
        }
        for f in ["f1", "f2", "f3", "f4"] {
            funcs.push(line("apk-b", f));
        }
        Corpus::from_records(manifest, funcs, CorpusOptions::default()).unwrap()
    }

    #[test]
    fn fixture_loads_sorted() {
        let c = two_apk_fixture();
        assert_eq!(c.apks.keys().collect::<Vec<_>>(), vec!["apk-a", "apk-b"]);
        assert_eq!(c.apks["apk-a"].function_ids, vec!["f1", "f2", "f3"]);
        assert_eq!(c.functions_of("apk-b").count(), 4);
        let st = corpus_stats(&c);
        assert_eq!(st, CorpusStats { apks: 2, categories: 2, families: 2, functions: 7 });
    }

    #[test]
    fn dangling_function_rejected() {
        let err = Corpus::from_records(
            vec![entry("a", "Adware", 1, 1)],
            vec![line("zzz", "f1")],
            CorpusOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DanglingFunction { apk_id } if apk_id == "zzz"));
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = Corpus::from_records(
            vec![entry("a", "Adware", 1, 1), entry("a", "Adware", 2, 1)],
            vec![],
            CorpusOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateKey(_)));
        let err = Corpus::from_records(
            vec![entry("a", "Adware", 1, 1)],
            vec![line("a", "f1"), line("a", "f1")],
            CorpusOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateKey(_)));
    }

    #[test]
    fn same_function_id_in_different_apks_is_fine() {
        let c = Corpus::from_records(
            vec![entry("a", "Adware", 1, 1), entry("b", "Adware", 2, 1)],
            vec![line("a", "f1"), line("b", "f1")],
            CorpusOptions::default(),
        )
        .unwrap();
        assert_eq!(c.functions.len(), 2);
    }

    #[test]
    fn empty_functions_file_gives_empty_apks() {
        let c = Corpus::from_records(
            vec![entry("a", "Adware", 1, 5), entry("b", "Trojan", 2, 3)],
            vec![],
            CorpusOptions::default(),
        )
        .unwrap();
        assert_eq!(c.apks.len(), 2);
        assert!(c.apks.values().all(|a| a.function_ids.is_empty() && a.method_count == 0));
    }

    #[test]
    fn empty_code_and_labels_are_malformed() {
        let mut l = line("a", "f1");
        l.code.clear();
        let err = Corpus::from_records(vec![entry("a", "Adware", 1, 1)], vec![l], CorpusOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 1, .. }));
        let err = Corpus::from_records(vec![entry("a", "", 1, 1)], vec![], CorpusOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { .. }));
    }

    #[test]
    fn malformed_json_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.json");
        let f = dir.path().join("functions.jsonl");
        fs::write(&m, serde_json::to_string(&vec![entry("a", "Adware", 1, 1)]).unwrap()).unwrap();
        let good = serde_json::to_string(&line("a", "f1")).unwrap();
        fs::write(&f, format!("{good}\n{{\"apk_id\": \n")).unwrap();
        let err = load_corpus(&m, &f).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 2, .. }), "{err}");
    }

    #[test]
    fn token_estimate_uses_configured_ratio() {
        let c = Corpus::from_records(
            vec![entry("a", "Adware", 1, 1)],
            vec![line("a", "f1")],
            CorpusOptions { chars_per_token: 2 },
        )
        .unwrap();
        let f = c.function("a", "f1").unwrap();
        assert_eq!(f.token_estimate, f.code.chars().count().div_ceil(2));
    }

    #[test]
    fn dedupe_keeps_smallest_id_per_category() {
        let c = Corpus::from_records(
            vec![
                entry("z9", "Adware", 100, 0),
                entry("a1", "Adware", 100, 0),
                entry("m5", "Trojan", 100, 0),
            ],
            vec![],
            CorpusOptions::default(),
        )
        .unwrap();
        let d = dedupe_category_wise(&c);
        assert_eq!(d.apks.keys().collect::<Vec<_>>(), vec!["a1", "m5"]);
        assert_eq!(dedupe_category_wise(&d), d);
    }

    #[test]
    fn dedupe_drops_functions_of_removed_apks() {
        let c = Corpus::from_records(
            vec![entry("a", "Adware", 10, 1), entry("b", "Adware", 10, 1)],
            vec![line("a", "f1"), line("b", "f1")],
            CorpusOptions::default(),
        )
        .unwrap();
        let d = dedupe_category_wise(&c);
        assert_eq!(d.functions.len(), 1);
        assert!(d.function("a", "f1").is_some());
    }

    #[test]
    fn bucketed_dedupe_merges_close_sizes() {
        let c = Corpus::from_records(
            vec![entry("a", "Adware", 1010, 0), entry("b", "Adware", 1090, 0)],
            vec![],
            CorpusOptions::default(),
        )
        .unwrap();
        assert_eq!(dedupe_category_wise(&c).apks.len(), 2);
        assert_eq!(dedupe_category_wise_bucketed(&c, 100).apks.len(), 1);
    }

    #[test]
    fn empty_corpus_stats_are_zero() {
        assert_eq!(
            corpus_stats(&Corpus::empty()),
            CorpusStats { apks: 0, categories: 0, families: 0, functions: 0 }
        );
    }

    #[test]
    fn write_then_load_roundtrips() {
        let c = two_apk_fixture();
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        let f = dir.path().join("f.jsonl");
        c.write(&m, &f).unwrap();
        let back = load_corpus(&m, &f).unwrap();
        assert_eq!(back.apks, c.apks);
        assert_eq!(back.functions, c.functions);
        assert_eq!(back.manifest_string().unwrap(), fs::read_to_string(&m).unwrap());
        assert_eq!(back.functions_string().unwrap(), fs::read_to_string(&f).unwrap());
    }
}
