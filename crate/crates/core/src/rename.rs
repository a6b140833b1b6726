//! Feed suggested names back into the decompiled code.
//!
//! Renaming is textual: whole-word identifier matches inside one APK are
//! replaced simultaneously, so swaps and chains never cascade.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::consistency::levenshtein;
use crate::corpus::{ApkSample, Corpus};
use crate::error::{Error, Result};
use crate::prompt::StructuredOutput;
use crate::report::{relative_change_percent, AggregateCell, DeltaCell};
use crate::text::{estimate_tokens, is_ident_char, DEFAULT_CHARS_PER_TOKEN};

/// Models whose copy rate exceeds this are left out of rename comparisons.
pub const DEFAULT_COPY_RATE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenameEntry {
    pub function_id: String,
    pub original: String,
    pub suggested: String,
    pub applied: bool,
    /// Name written into the code; differs from `suggested` after suffixing.
    pub renamed_to: String,
    pub collision_suffix: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenameMap {
    pub apk_id: String,
    pub entries: Vec<RenameEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenameScope {
    /// Every whole-word occurrence inside the APK.
    #[default]
    DefinitionsAndCallSites,
    /// Only the first occurrence inside the function's own code.
    DefinitionsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenameOptions {
    pub scope: RenameScope,
    pub chars_per_token: usize,
}

impl Default for RenameOptions {
    fn default() -> Self {
        Self { scope: RenameScope::default(), chars_per_token: DEFAULT_CHARS_PER_TOKEN }
    }
}

impl RenameMap {
    pub fn applied(&self) -> impl Iterator<Item = &RenameEntry> {
        self.entries.iter().filter(|e| e.applied)
    }
}

fn index_outputs(outputs: &[StructuredOutput]) -> BTreeMap<(&str, &str), &StructuredOutput> {
    outputs.iter().map(|o| ((o.apk_id.as_str(), o.function_id.as_str()), o)).collect()
}

/// Share of functions whose suggested name equals the original exactly.
pub fn compute_copy_rate(outputs: &[StructuredOutput], corpus: &Corpus) -> Result<f64> {
    let by_key = index_outputs(outputs);
    if by_key.len() != corpus.functions.len() {
        return Err(Error::CoverageMismatch(format!(
            "{} outputs for {} corpus functions",
            by_key.len(),
            corpus.functions.len()
        )));
    }
    if corpus.functions.is_empty() {
        return Ok(0.0);
    }
    let mut copies = 0usize;
    for (key, f) in &corpus.functions {
        let o = by_key.get(&(key.apk_id.as_str(), key.function_id.as_str())).ok_or_else(|| {
            Error::CoverageMismatch(format!("no output for {}/{}", key.apk_id, key.function_id))
        })?;
        if o.suggested_name == f.original_name {
            copies += 1;
        }
    }
    Ok(copies as f64 / corpus.functions.len() as f64)
}

pub fn exceeds_copy_threshold(copy_rate: f64, threshold: f64) -> bool {
    copy_rate > threshold
}

/// Collisions get `_2`, `_3`, ... in function_id order. A name is taken if
/// an earlier entry already uses it or another function keeps it unchanged.
pub fn build_rename_map(corpus: &Corpus, apk: &ApkSample, outputs: &[StructuredOutput]) -> Result<RenameMap> {
    let by_key = index_outputs(outputs);
    let mut pairs = Vec::with_capacity(apk.function_ids.len());
    for fid in &apk.function_ids {
        let f = corpus.function(&apk.apk_id, fid).ok_or_else(|| {
            Error::CoverageMismatch(format!("corpus has no function {}/{fid}", apk.apk_id))
        })?;
        let o = by_key.get(&(apk.apk_id.as_str(), fid.as_str())).ok_or_else(|| {
            Error::CoverageMismatch(format!("no output for {}/{fid}", apk.apk_id))
        })?;
        pairs.push((fid.clone(), f.original_name.clone(), o.suggested_name.clone()));
    }
    pairs.sort();

    let mut taken: BTreeSet<String> = pairs
        .iter()
        .filter(|(_, orig, sugg)| orig == sugg)
        .map(|(_, orig, _)| orig.clone())
        .collect();
    let mut entries = Vec::with_capacity(pairs.len());
    for (function_id, original, suggested) in pairs {
        if original == suggested {
            entries.push(RenameEntry {
                function_id,
                renamed_to: original.clone(),
                original,
                suggested,
                applied: false,
                collision_suffix: None,
            });
            continue;
        }
        let mut renamed_to = suggested.clone();
        let mut collision_suffix = None;
        let mut n = 2u32;
        while taken.contains(&renamed_to) {
            renamed_to = format!("{suggested}_{n}");
            collision_suffix = Some(n);
            n += 1;
        }
        taken.insert(renamed_to.clone());
        entries.push(RenameEntry { function_id, original, suggested, applied: true, renamed_to, collision_suffix });
    }
    Ok(RenameMap { apk_id: apk.apk_id.clone(), entries })
}

/// Simultaneous whole-word substitution; `limit` caps the number of
/// replacements.
fn substitute(code: &str, map: &BTreeMap<&str, &str>, limit: Option<usize>) -> String {
    let mut out = String::with_capacity(code.len());
    let mut done = 0usize;
    let mut rest = code;
    while let Some(start) = rest.find(is_ident_char) {
        out.push_str(&rest[..start]);
        let word_and_after = &rest[start..];
        let end = word_and_after.find(|c: char| !is_ident_char(c)).unwrap_or(word_and_after.len());
        let word = &word_and_after[..end];
        match map.get(word) {
            Some(new) if limit.is_none_or(|l| done < l) => {
                out.push_str(new);
                done += 1;
            }
            _ => out.push_str(word),
        }
        rest = &word_and_after[end..];
    }
    out.push_str(rest);
    out
}

/// Rewrite each APK's code with its map. Other APKs' code is never touched.
///
/// An original shared by several functions (overloads) maps to the first
/// applied entry in function_id order at call sites; each function's own
/// code always uses its own entry.
pub fn apply_renames(corpus: &Corpus, maps: &[RenameMap], opts: RenameOptions) -> Result<Corpus> {
    let by_apk: BTreeMap<&str, &RenameMap> = maps.iter().map(|m| (m.apk_id.as_str(), m)).collect();
    let mut out = corpus.clone();
    for apk_id in corpus.apks.keys() {
        let map = by_apk
            .get(apk_id.as_str())
            .ok_or_else(|| Error::CoverageMismatch(format!("no rename map for apk {apk_id}")))?;
        let mut apk_wide: BTreeMap<&str, &str> = BTreeMap::new();
        for e in map.applied() {
            match apk_wide.get(e.original.as_str()) {
                Some(prev) if *prev != e.renamed_to => warn!(
                    "{apk_id}: {} has several renames; call sites use {prev}",
                    e.original
                ),
                Some(_) => {}
                None => {
                    apk_wide.insert(&e.original, &e.renamed_to);
                }
            }
        }
        for e in &map.entries {
            let key = crate::corpus::FunctionKey::new(apk_id.as_str(), e.function_id.as_str());
            let f = out
                .functions
                .get_mut(&key)
                .ok_or_else(|| Error::CoverageMismatch(format!("map names unknown function {apk_id}/{}", e.function_id)))?;
            let code = match opts.scope {
                RenameScope::DefinitionsAndCallSites => {
                    let mut own = apk_wide.clone();
                    own.insert(&e.original, &e.renamed_to);
                    own.retain(|k, v| k != v);
                    substitute(&f.code, &own, None)
                }
                RenameScope::DefinitionsOnly if e.applied => {
                    let own = BTreeMap::from([(e.original.as_str(), e.renamed_to.as_str())]);
                    substitute(&f.code, &own, Some(1))
                }
                RenameScope::DefinitionsOnly => f.code.clone(),
            };
            if code != f.code {
                f.token_estimate = estimate_tokens(&code, opts.chars_per_token);
                f.code = code;
            }
            f.original_name = e.renamed_to.clone();
        }
    }
    let source = corpus.digest()?;
    out.provenance.derived_from = Some(source.clone());
    out.provenance.note = Some(format!("renamed with model-suggested names ({:?}) from corpus {source}", opts.scope));
    Ok(out)
}

/// Relative change per metric for cells present in both sets.
pub fn rq2_delta(old: &[AggregateCell], new: &[AggregateCell]) -> Vec<DeltaCell> {
    new.iter()
        .filter_map(|n| {
            let o = old.iter().find(|o| o.metric == n.metric)?;
            Some(DeltaCell {
                row: n.row.clone(),
                metric: n.metric.clone(),
                old_mean: o.mean,
                new_mean: n.mean,
                percent: relative_change_percent(o.mean, n.mean),
            })
        })
        .collect()
}

/// Edit distance between original and applied suggestion, counted per
/// distance; small distances flag near-trivial renames.
pub fn edit_distance_histogram(maps: &[RenameMap]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for e in maps.iter().flat_map(|m| m.applied()) {
        *hist.entry(levenshtein(&e.original, &e.suggested)).or_insert(0) += 1;
    }
    hist
}
