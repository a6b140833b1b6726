//! App-purpose descriptions and their n-gram similarity to references.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use log::warn;
use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::backend::Session;
use crate::corpus::ApkSample;
use crate::error::{Error, Result};
use crate::prompt::StructuredOutput;
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppDescription {
    pub apk_id: String,
    pub model_id: String,
    pub text: String,
    pub reference: Option<String>,
    pub v_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticRecord {
    pub apk_id: String,
    pub model_id: String,
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub v_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BleuOptions {
    pub max_n: usize,
    pub brevity_penalty: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        Self { max_n: 2, brevity_penalty: false }
    }
}

/// Token to equivalent tokens, consulted as a third METEOR matching stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynonymTable(pub BTreeMap<String, Vec<String>>);

impl SynonymTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)?;
        Ok(Self(
            raw.into_iter()
                .map(|(k, v)| (k.to_lowercase(), v.into_iter().map(|s| s.to_lowercase()).collect()))
                .collect(),
        ))
    }

    fn equivalent(&self, a: &str, b: &str) -> bool {
        self.0.get(a).is_some_and(|v| v.iter().any(|s| s == b))
            || self.0.get(b).is_some_and(|v| v.iter().any(|s| s == a))
    }
}

fn stemmer() -> &'static Stemmer {
    static S: OnceLock<Stemmer> = OnceLock::new();
    S.get_or_init(|| Stemmer::create(Algorithm::English))
}

fn both_nonempty(cand: &[String], reference: &[String], metric: &str) -> bool {
    if cand.is_empty() || reference.is_empty() {
        warn!("{metric}: empty candidate or reference text; scoring 0");
        return false;
    }
    true
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram precision of order `n`; 0 when the candidate has no n-grams.
pub fn modified_precision(cand: &[String], reference: &[String], n: usize) -> f64 {
    let c = ngram_counts(cand, n);
    let total: usize = c.values().sum();
    if total == 0 {
        return 0.0;
    }
    let r = ngram_counts(reference, n);
    let clipped: usize = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    clipped as f64 / total as f64
}

/// `exp(sum w_n ln p_n)` with uniform weights over `n = 1..=max_n`.
pub fn bleu(candidate: &str, reference: &str, opts: BleuOptions) -> f64 {
    bleu_tokens(&tokenize(candidate), &tokenize(reference), opts)
}

pub fn bleu_tokens(cand: &[String], reference: &[String], opts: BleuOptions) -> f64 {
    assert!(opts.max_n >= 1, "BLEU needs max_n >= 1");
    if !both_nonempty(cand, reference, "bleu") {
        return 0.0;
    }
    let w = 1.0 / opts.max_n as f64;
    let mut log_sum = 0.0;
    for n in 1..=opts.max_n {
        let p = modified_precision(cand, reference, n);
        if p == 0.0 {
            return 0.0;
        }
        log_sum += w * p.ln();
    }
    let bp = if opts.brevity_penalty && cand.len() < reference.len() {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    (bp * log_sum.exp()).min(1.0)
}

/// Candidate/reference index pairs aligned by exact, stem, then synonym
/// matching; each stage only sees tokens left unaligned by earlier ones.
fn meteor_alignment(
    cand: &[String],
    reference: &[String],
    synonyms: Option<&SynonymTable>,
) -> Vec<(usize, usize)> {
    let stems_c: Vec<String> = cand.iter().map(|t| stemmer().stem(t).into_owned()).collect();
    let stems_r: Vec<String> = reference.iter().map(|t| stemmer().stem(t).into_owned()).collect();
    let mut c_used = vec![false; cand.len()];
    let mut r_used = vec![false; reference.len()];
    let mut pairs = Vec::new();

    let mut stage = |matches: &dyn Fn(usize, usize) -> bool| {
        for i in 0..cand.len() {
            if c_used[i] {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !r_used[j] && matches(i, j)) {
                c_used[i] = true;
                r_used[j] = true;
                pairs.push((i, j));
            }
        }
    };
    stage(&|i, j| cand[i] == reference[j]);
    stage(&|i, j| stems_c[i] == stems_r[j]);
    if let Some(table) = synonyms {
        stage(&|i, j| table.equivalent(&cand[i], &reference[j]));
    }
    pairs.sort_unstable();
    pairs
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR without WordNet: `F_mean * (1 - 0.5 (chunks/m)^3)` with
/// `F_mean = 10PR / (R + 9P)`.
pub fn meteor_lite(candidate: &str, reference: &str, synonyms: Option<&SynonymTable>) -> f64 {
    meteor_tokens(&tokenize(candidate), &tokenize(reference), synonyms)
}

pub fn meteor_tokens(cand: &[String], reference: &[String], synonyms: Option<&SynonymTable>) -> f64 {
    if !both_nonempty(cand, reference, "meteor") {
        return 0.0;
    }
    let pairs = meteor_alignment(cand, reference, synonyms);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = count_chunks(&pairs) as f64 / m as f64;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L as the balanced F1 of LCS precision and recall.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn rouge_l_tokens(cand: &[String], reference: &[String]) -> f64 {
    if !both_nonempty(cand, reference, "rouge_l") {
        return 0.0;
    }
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn semantic_for_app(
    description: &AppDescription,
    bleu_opts: BleuOptions,
    synonyms: Option<&SynonymTable>,
) -> Result<SemanticRecord> {
    let reference = description
        .reference
        .as_deref()
        .ok_or_else(|| Error::MissingReference { apk_id: description.apk_id.clone() })?;
    let cand = tokenize(&description.text);
    let refs = tokenize(reference);
    Ok(SemanticRecord {
        apk_id: description.apk_id.clone(),
        model_id: description.model_id.clone(),
        bleu: bleu_tokens(&cand, &refs, bleu_opts),
        meteor: meteor_tokens(&cand, &refs, synonyms),
        rouge_l: rouge_l_tokens(&cand, &refs),
        v_used: description.v_used,
    })
}

/// Select top-v outputs under the session's context budget and ask the
/// model for an app-purpose description.
pub fn generate_app_description(
    session: &Session,
    apk: &ApkSample,
    outputs: &[StructuredOutput],
) -> Result<AppDescription> {
    let mine: Vec<StructuredOutput> =
        outputs.iter().filter(|o| o.apk_id == apk.apk_id).cloned().collect();
    if mine.is_empty() {
        return Err(Error::CoverageMismatch(format!("no outputs for apk {}", apk.apk_id)));
    }
    let selected = session.builder.select_top_v(&mine, session.builder.prompt_budget())?;
    let prompt = session.builder.build_app_purpose_prompt(&selected);
    let completion = session.complete(&prompt)?;
    let text = completion.response.trim().to_string();
    let prefix = session.builder.prefix.trim_end_matches('.');
    if !text.starts_with(prefix) {
        warn!("description for {} does not start with {prefix:?}", apk.apk_id);
    }
    Ok(AppDescription {
        apk_id: apk.apk_id.clone(),
        model_id: session.backend_id().to_string(),
        text,
        reference: apk.reference_description.clone(),
        v_used: selected.len(),
    })
}
