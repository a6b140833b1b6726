//! Maliciousness consistency (MCS) and name consistency (NCS).
//!
//! MCS compares the per-app distribution of scores obtained from raw code
//! with the one obtained from descriptors, via Jensen-Shannon divergence in
//! nats divided by ln 2. NCS is one minus the length-normalized Levenshtein
//! distance between the suggested name and the name regenerated from the
//! model's own summary.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::backend::{DescriptorScore, RegeneratedName};
use crate::corpus::ApkSample;
use crate::error::{Error, Result};
use crate::prompt::StructuredOutput;

/// Normalized score vector of one app, indexed by sorted `function_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub apk_id: String,
    pub values: Vec<f64>,
}

impl ScoreDistribution {
    pub fn from_scores(apk_id: &str, raw: &[f64]) -> Result<Self> {
        Ok(Self { apk_id: apk_id.to_string(), values: normalize_scores(raw)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameConsistency {
    pub function_id: String,
    pub n_raw: String,
    pub n_reg: String,
    pub ncs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub apk_id: String,
    pub model_id: String,
    pub mcs: f64,
    pub ncs_mean: f64,
    pub names: Vec<NameConsistency>,
}

/// Divide by the sum; an all-zero vector becomes uniform.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyVector);
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::DegenerateData(format!("score {bad} is not a non-negative number")));
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        log::debug!("all-zero score vector of length {} normalized to uniform", raw.len());
        let u = 1.0 / raw.len() as f64;
        return Ok(vec![u; raw.len()]);
    }
    Ok(raw.iter().map(|v| v / total).collect())
}

/// `sum p ln(p/q)` in nats, with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    let mut sum = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::UnsupportedSupport { index: i });
        }
        sum += pi * (pi / qi).ln();
    }
    Ok(sum.max(0.0))
}

/// Jensen-Shannon divergence in nats, within `[0, ln 2]`.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = 0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?;
    Ok(jsd.clamp(0.0, LN_2))
}

/// `1 - JSD(norm(raw), norm(des)) / ln 2`.
pub fn mcs(raw_scores: &[f64], des_scores: &[f64]) -> Result<f64> {
    if raw_scores.len() != des_scores.len() {
        return Err(Error::LengthMismatch { left: raw_scores.len(), right: des_scores.len() });
    }
    let p = normalize_scores(raw_scores)?;
    let q = normalize_scores(des_scores)?;
    Ok((1.0 - jensen_shannon(&p, &q)? / LN_2).clamp(0.0, 1.0))
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Name consistency; case-sensitive after trimming whitespace.
pub fn ncs(n_raw: &str, n_reg: &str) -> f64 {
    let a = n_raw.trim();
    let b = n_reg.trim();
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

fn index_by_function<'a, T>(
    what: &str,
    apk: &ApkSample,
    items: impl Iterator<Item = (&'a str, &'a str, T)>,
) -> Result<BTreeMap<&'a str, T>> {
    let mut map = BTreeMap::new();
    for (apk_id, fid, v) in items {
        if apk_id == apk.apk_id {
            map.insert(fid, v);
        }
    }
    let expected: Vec<&str> = apk.function_ids.iter().map(String::as_str).collect();
    let got: Vec<&str> = map.keys().copied().collect();
    if got != expected {
        let missing: Vec<&&str> = expected.iter().filter(|f| !map.contains_key(**f)).collect();
        return Err(Error::CoverageMismatch(format!(
            "{what} for apk {}: expected {} functions, got {} (missing {:?})",
            apk.apk_id,
            expected.len(),
            got.len(),
            missing.iter().take(5).collect::<Vec<_>>()
        )));
    }
    Ok(map)
}

/// MCS and per-function NCS for one app. Inputs may contain other apps'
/// records; exactly this app's functions must be covered by each.
pub fn consistency_for_app(
    apk: &ApkSample,
    raw_outputs: &[StructuredOutput],
    des_scores: &[DescriptorScore],
    regen_names: &[RegeneratedName],
) -> Result<ConsistencyRecord> {
    let raw = index_by_function(
        "raw outputs",
        apk,
        raw_outputs.iter().map(|o| (o.apk_id.as_str(), o.function_id.as_str(), o)),
    )?;
    let des = index_by_function(
        "descriptor scores",
        apk,
        des_scores.iter().map(|d| (d.apk_id.as_str(), d.function_id.as_str(), d.score)),
    )?;
    let reg = index_by_function(
        "regenerated names",
        apk,
        regen_names.iter().map(|n| (n.apk_id.as_str(), n.function_id.as_str(), n.name.as_str())),
    )?;

    let raw_vec: Vec<f64> = raw.values().map(|o| o.maliciousness).collect();
    let des_vec: Vec<f64> = des.values().copied().collect();
    let mcs = mcs(&raw_vec, &des_vec)?;

    let names: Vec<NameConsistency> = raw
        .iter()
        .map(|(fid, o)| {
            let n_reg = reg[fid];
            NameConsistency {
                function_id: fid.to_string(),
                n_raw: o.suggested_name.clone(),
                n_reg: n_reg.to_string(),
                ncs: ncs(&o.suggested_name, n_reg),
            }
        })
        .collect();
    let ncs_mean = names.iter().map(|n| n.ncs).sum::<f64>() / names.len() as f64;
    let model_id = raw.values().next().map(|o| o.model_id.clone()).unwrap_or_default();

    Ok(ConsistencyRecord { apk_id: apk.apk_id.clone(), model_id, mcs, ncs_mean, names })
}
