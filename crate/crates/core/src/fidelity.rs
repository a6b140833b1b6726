//! Category classifier over app descriptor documents and the confidence
//! drop it shows when the most malicious functions are taken out.
//!
//! Features are sublinear term frequencies weighted by smoothed IDF and
//! L2-normalized; the model is multinomial logistic regression trained by
//! full-batch gradient descent.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ApkSample;
use crate::error::{Error, Result};
use crate::prompt::{render_descriptor, StructuredOutput};
use crate::text::tokenize;

pub const DEFAULT_KS: [usize; 3] = [2, 5, 8];
pub const DESK_ACCURACY_GATE: f64 = 0.9;
pub const FULL_SCALE_ACCURACY_GATE: f64 = 0.95;
const MIN_DOCS_PER_CLASS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppDocument {
    pub apk_id: String,
    pub category: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    /// Share of each class used for training; the rest is held out.
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub accuracy_gate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.8,
            epochs: 400,
            learning_rate: 2.0,
            l2: 1e-4,
            accuracy_gate: DESK_ACCURACY_GATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub train_fraction: f64,
    pub train_ids: Vec<String>,
    pub held_out_ids: Vec<String>,
    pub held_out_accuracy: f64,
    pub accuracy_gate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryClassifier {
    pub labels: Vec<String>,
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    /// One row per label, one column per vocabulary entry.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityEntry {
    pub k: usize,
    pub removed_ids: Vec<String>,
    pub p_red: f64,
    /// `None` when the full-document confidence is zero.
    pub mfs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub apk_id: String,
    pub model_id: String,
    pub category: String,
    pub predicted_label: String,
    pub p_full: f64,
    pub entries: Vec<FidelityEntry>,
}

type SparseVec = Vec<(usize, f64)>;

/// Descriptor blocks of one app in function_id order, blank-line separated.
/// Functions listed in `exclude` are left out.
pub fn build_app_document_without(
    apk: &ApkSample,
    outputs: &[StructuredOutput],
    exclude: &BTreeSet<String>,
) -> Result<AppDocument> {
    let mut by_id: BTreeMap<&str, &StructuredOutput> = BTreeMap::new();
    for o in outputs.iter().filter(|o| o.apk_id == apk.apk_id) {
        if by_id.insert(o.function_id.as_str(), o).is_some() {
            return Err(Error::CoverageMismatch(format!(
                "duplicate output for {}/{}",
                apk.apk_id, o.function_id
            )));
        }
    }
    let expected: BTreeSet<&str> = apk.function_ids.iter().map(String::as_str).collect();
    let got: BTreeSet<&str> = by_id.keys().copied().collect();
    if expected != got {
        let missing: Vec<&&str> = expected.difference(&got).take(5).collect();
        let extra: Vec<&&str> = got.difference(&expected).take(5).collect();
        return Err(Error::CoverageMismatch(format!(
            "outputs for apk {}: missing {missing:?}, unexpected {extra:?}",
            apk.apk_id
        )));
    }
    let blocks: Vec<String> = by_id
        .iter()
        .filter(|(fid, _)| !exclude.contains(**fid))
        .map(|(_, o)| render_descriptor(&o.summary, &o.suggested_name))
        .collect();
    Ok(AppDocument {
        apk_id: apk.apk_id.clone(),
        category: apk.category.clone(),
        text: blocks.join("\n\n"),
    })
}

pub fn build_app_document(apk: &ApkSample, outputs: &[StructuredOutput]) -> Result<AppDocument> {
    build_app_document_without(apk, outputs, &BTreeSet::new())
}

/// The `k` highest-scored function ids, ties by ascending id.
pub fn top_k_malicious(outputs: &[StructuredOutput], k: usize) -> Vec<String> {
    assert!(k >= 1, "k must be at least 1");
    let mut ranked: Vec<&StructuredOutput> = outputs.iter().collect();
    ranked.sort_by(|a, b| {
        b.maliciousness
            .total_cmp(&a.maliciousness)
            .then_with(|| a.function_id.cmp(&b.function_id))
    });
    ranked.into_iter().take(k).map(|o| o.function_id.clone()).collect()
}

/// `(p_full - p_red) / p_full`, undefined at zero confidence.
pub fn relative_drop(p_full: f64, p_red: f64) -> Option<f64> {
    (p_full > 0.0).then(|| (p_full - p_red) / p_full)
}

fn term_counts(text: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn stratified_split(docs: &[&AppDocument], labels: &[String], opts: &TrainOptions) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in labels {
        let mut idx: Vec<usize> = (0..docs.len()).filter(|&i| &docs[i].category == label).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_test = ((n as f64 * (1.0 - opts.train_fraction)).round() as usize).clamp(1, n - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

impl CategoryClassifier {
    pub fn num_features(&self) -> usize {
        self.idf.len()
    }

    fn featurize(&self, text: &str) -> SparseVec {
        let mut v: SparseVec = term_counts(text)
            .into_iter()
            .filter_map(|(t, c)| {
                let j = *self.vocabulary.get(&t)?;
                let w = (1.0 + (c as f64).ln()) * self.idf[j];
                (w > 0.0).then_some((j, w))
            })
            .collect();
        v.sort_unstable_by_key(|(j, _)| *j);
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut v {
                *w /= norm;
            }
        }
        v
    }

    fn logits(&self, x: &SparseVec) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + x.iter().map(|(j, w)| row[*j] * w).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, text: &str) -> Vec<f64> {
        softmax(&self.logits(&self.featurize(text)))
    }

    pub fn predict(&self, text: &str) -> &str {
        &self.labels[argmax(&self.predict_proba(text))]
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::jsonl::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        let shape_ok = c.weights.len() == c.labels.len()
            && c.bias.len() == c.labels.len()
            && c.weights.iter().all(|r| r.len() == c.idf.len())
            && c.vocabulary.values().all(|j| *j < c.idf.len());
        if !shape_ok {
            return Err(Error::Config(format!("{}: classifier shapes disagree", path.display())));
        }
        Ok(c)
    }
}

/// Fit on a stratified seeded split and enforce the held-out accuracy gate.
pub fn train_classifier(documents: &[AppDocument], opts: &TrainOptions) -> Result<CategoryClassifier> {
    let mut docs: Vec<&AppDocument> = documents.iter().collect();
    docs.sort_by(|a, b| a.apk_id.cmp(&b.apk_id));
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &docs {
        *per_class.entry(d.category.as_str()).or_default() += 1;
    }
    if per_class.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "classifier needs at least 2 categories, got {}",
            per_class.len()
        )));
    }
    if let Some((label, n)) = per_class.iter().find(|(_, n)| **n < MIN_DOCS_PER_CLASS) {
        return Err(Error::DegenerateData(format!(
            "category {label} has {n} documents, need at least {MIN_DOCS_PER_CLASS}"
        )));
    }
    let labels: Vec<String> = per_class.keys().map(|s| s.to_string()).collect();
    let (train_idx, test_idx) = stratified_split(&docs, &labels, opts);

    let train_counts: Vec<BTreeMap<String, usize>> =
        train_idx.iter().map(|&i| term_counts(&docs[i].text)).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for counts in &train_counts {
        for t in counts.keys() {
            *df.entry(t.as_str()).or_default() += 1;
        }
    }
    let n_train = train_idx.len() as f64;
    let vocabulary: BTreeMap<String, usize> =
        df.keys().enumerate().map(|(j, t)| (t.to_string(), j)).collect();
    let idf: Vec<f64> = df.values().map(|d| ((1.0 + n_train) / (1.0 + *d as f64)).ln()).collect();

    let mut model = CategoryClassifier {
        labels: labels.clone(),
        vocabulary,
        idf,
        weights: vec![vec![0.0; df.len()]; labels.len()],
        bias: vec![0.0; labels.len()],
        metadata: TrainingMetadata {
            seed: opts.seed,
            epochs: opts.epochs,
            learning_rate: opts.learning_rate,
            l2: opts.l2,
            train_fraction: opts.train_fraction,
            train_ids: train_idx.iter().map(|&i| docs[i].apk_id.clone()).collect(),
            held_out_ids: test_idx.iter().map(|&i| docs[i].apk_id.clone()).collect(),
            held_out_accuracy: 0.0,
            accuracy_gate: opts.accuracy_gate,
        },
    };
    let xs: Vec<SparseVec> = train_idx.iter().map(|&i| model.featurize(&docs[i].text)).collect();
    let ys: Vec<usize> = train_idx
        .iter()
        .map(|&i| model.label_index(&docs[i].category).expect("label from training set"))
        .collect();
    fit(&mut model, &xs, &ys, opts);

    let correct = test_idx
        .iter()
        .filter(|&&i| model.predict(&docs[i].text) == docs[i].category)
        .count();
    let accuracy = correct as f64 / test_idx.len() as f64;
    model.metadata.held_out_accuracy = accuracy;
    info!(
        "classifier: {} labels, {} features, held-out accuracy {accuracy:.4} ({correct}/{})",
        labels.len(),
        model.num_features(),
        test_idx.len()
    );
    if accuracy < opts.accuracy_gate {
        return Err(Error::AccuracyGate { actual: accuracy, gate: opts.accuracy_gate });
    }
    Ok(model)
}

fn fit(model: &mut CategoryClassifier, xs: &[SparseVec], ys: &[usize], opts: &TrainOptions) {
    let n = xs.len() as f64;
    let classes = model.labels.len();
    let features = model.num_features();
    for _ in 0..opts.epochs {
        let mut grad_w = vec![vec![0.0; features]; classes];
        let mut grad_b = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(ys) {
            let p = softmax(&model.logits(x));
            for c in 0..classes {
                let err = p[c] - if c == y { 1.0 } else { 0.0 };
                grad_b[c] += err;
                for (j, w) in x {
                    grad_w[c][*j] += err * w;
                }
            }
        }
        for c in 0..classes {
            model.bias[c] -= opts.learning_rate * grad_b[c] / n;
            for (w, g) in model.weights[c].iter_mut().zip(&grad_w[c]) {
                *w -= opts.learning_rate * (g / n + opts.l2 * *w);
            }
        }
    }
}

/// ŷ is taken from the full document and reused for every reduced one.
pub fn fidelity_for_app(
    classifier: &CategoryClassifier,
    apk: &ApkSample,
    outputs: &[StructuredOutput],
    ks: &[usize],
    model_id: &str,
) -> Result<FidelityRecord> {
    let full = build_app_document(apk, outputs)?;
    let p_full_vec = classifier.predict_proba(&full.text);
    let y_hat = argmax(&p_full_vec);
    let p_full = p_full_vec[y_hat];
    let mine: Vec<StructuredOutput> =
        outputs.iter().filter(|o| o.apk_id == apk.apk_id).cloned().collect();
    let mut entries = Vec::with_capacity(ks.len());
    for &k in ks {
        let removed_ids = top_k_malicious(&mine, k);
        let exclude: BTreeSet<String> = removed_ids.iter().cloned().collect();
        let reduced = build_app_document_without(apk, &mine, &exclude)?;
        let p_red = classifier.predict_proba(&reduced.text)[y_hat];
        let mfs = relative_drop(p_full, p_red);
        if mfs.is_none() {
            warn!("{}", Error::ZeroConfidence { apk_id: apk.apk_id.clone() });
        }
        entries.push(FidelityEntry { k, removed_ids, p_red, mfs });
    }
    Ok(FidelityRecord {
        apk_id: apk.apk_id.clone(),
        model_id: model_id.to_string(),
        category: apk.category.clone(),
        predicted_label: classifier.labels[y_hat].clone(),
        p_full,
        entries,
    })
}

/// Single-k variant that reports zero confidence as an error.
pub fn mfs_k(
    classifier: &CategoryClassifier,
    apk: &ApkSample,
    outputs: &[StructuredOutput],
    k: usize,
) -> Result<FidelityEntry> {
    let rec = fidelity_for_app(classifier, apk, outputs, &[k], "")?;
    let entry = rec.entries.into_iter().next().expect("one k requested");
    if entry.mfs.is_none() {
        return Err(Error::ZeroConfidence { apk_id: apk.apk_id.clone() });
    }
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::OnceLock;

    const CLASSES: [(&str, &str); 4] = [
        ("Adware", "adpopup"),
        ("Banking", "overlaybank"),
        ("Riskware", "rootexec"),
        ("Sms", "premiumsms"),
    ];
    const SHARED: [&str; 12] = [
        "read", "write", "buffer", "list", "view", "update", "layout", "string", "cache", "init",
        "value", "config",
    ];

    fn planted_docs(per_class: usize, seed: u64) -> Vec<AppDocument> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = Vec::new();
        for (label, token) in CLASSES {
            for i in 0..per_class {
                let mut words: Vec<String> =
                    (0..20).map(|_| SHARED[rng.random_range(0..SHARED.len())].to_string()).collect();
                words.push(token.to_string());
                words.push(token.to_string());
                docs.push(AppDocument {
                    apk_id: format!("{label}-{i:02}"),
                    category: label.to_string(),
                    text: words.join(" "),
                });
            }
        }
        docs
    }

    fn trained() -> &'static CategoryClassifier {
        static C: OnceLock<CategoryClassifier> = OnceLock::new();
        C.get_or_init(|| train_classifier(&planted_docs(8, 7), &TrainOptions::default()).unwrap())
    }

    fn output(apk: &str, fid: &str, summary: &str, score: f64) -> StructuredOutput {
        StructuredOutput {
            apk_id: apk.into(),
            function_id: fid.into(),
            model_id: "m".into(),
            summary: summary.into(),
            suggested_name: "name".into(),
            maliciousness: score,
            raw_response: String::new(),
            parse_warnings: vec![],
        }
    }

    fn apk(id: &str, fids: &[&str]) -> ApkSample {
        ApkSample {
            apk_id: id.into(),
            category: "Adware".into(),
            family: "f".into(),
            size_bytes: 0,
            method_count: fids.len() as u64,
            function_ids: fids.iter().map(|s| s.to_string()).collect(),
            reference_description: None,
        }
    }

    #[test]
    fn document_is_sorted_and_order_independent() {
        let a = apk("a", &["f1", "f2"]);
        let o = [output("a", "f2", "second", 1.0), output("a", "f1", "first", 2.0)];
        let d = build_app_document(&a, &o).unwrap();
        assert_eq!(d.text, "Summary: first\nSuggested name: name\n\nSummary: second\nSuggested name: name");
        let rev = [o[1].clone(), o[0].clone()];
        assert_eq!(build_app_document(&a, &rev).unwrap(), d);
        assert!(matches!(build_app_document(&a, &o[..1]), Err(Error::CoverageMismatch(_))));
    }

    #[test]
    fn top_k_ties_and_overflow() {
        let o = [
            output("a", "a", "", 9.0),
            output("a", "c", "", 7.0),
            output("a", "b", "", 7.0),
            output("a", "d", "", 2.0),
        ];
        assert_eq!(top_k_malicious(&o, 2), vec!["a", "b"]);
        assert_eq!(top_k_malicious(&o, 10).len(), 4);
        assert_eq!(top_k_malicious(&o, 1), vec!["a"]);
    }

    #[test]
    fn relative_drop_arithmetic() {
        assert!((relative_drop(0.8, 0.6).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(relative_drop(0.7, 0.7), Some(0.0));
        assert!((relative_drop(0.5, 0.6).unwrap() + 0.2).abs() < 1e-12);
        assert_eq!(relative_drop(0.0, 0.1), None);
    }

    #[test]
    fn planted_corpus_is_separable() {
        let c = trained();
        assert_eq!(c.metadata.held_out_accuracy, 1.0);
        assert_eq!(c.metadata.held_out_ids.len(), 8);
        for (label, token) in CLASSES {
            let p = c.predict_proba(&format!("read buffer {token} {token} view"));
            assert!(p[c.label_index(label).unwrap()] > 0.9, "{label}: {p:?}");
        }
        let empty = c.predict_proba("");
        assert!((empty.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(empty.iter().all(|p| (p - 0.25).abs() < 0.1), "{empty:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let docs = planted_docs(6, 3);
        let a = train_classifier(&docs, &TrainOptions::default()).unwrap();
        let mut shuffled = docs.clone();
        shuffled.reverse();
        let b = train_classifier(&shuffled, &TrainOptions::default()).unwrap();
        assert_eq!(a, b);
        let other = train_classifier(&docs, &TrainOptions { seed: 99, ..TrainOptions::default() }).unwrap();
        assert_ne!(a.metadata.held_out_ids, other.metadata.held_out_ids);
    }

    #[test]
    fn degenerate_inputs_and_gate() {
        let one_class: Vec<AppDocument> =
            planted_docs(6, 1).into_iter().filter(|d| d.category == "Adware").collect();
        assert!(matches!(train_classifier(&one_class, &TrainOptions::default()), Err(Error::DegenerateData(_))));
        let few = planted_docs(3, 1);
        assert!(matches!(train_classifier(&few, &TrainOptions::default()), Err(Error::DegenerateData(_))));
        // labels carry no signal in the text
        let mut noise = planted_docs(6, 1);
        for d in &mut noise {
            d.text = "read write buffer".into();
        }
        let err = train_classifier(&noise, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::AccuracyGate { .. }), "{err}");
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.json");
        trained().save(&path).unwrap();
        assert_eq!(&CategoryClassifier::load(&path).unwrap(), trained());
    }

    #[test]
    fn removing_planted_blocks_drops_confidence() {
        let c = trained();
        let a = apk("x", &["f1", "f2", "f3"]);
        let o = [
            output("x", "f1", "read buffer adpopup adpopup", 9.0),
            output("x", "f2", "update view layout", 2.0),
            output("x", "f3", "cache init value", 1.0),
        ];
        let rec = fidelity_for_app(c, &a, &o, &[1, 3], "m").unwrap();
        assert_eq!(rec.predicted_label, "Adware");
        assert_eq!(rec.entries[0].removed_ids, vec!["f1"]);
        assert!(rec.entries[0].mfs.unwrap() > 0.5);
        assert_eq!(rec.entries[1].removed_ids.len(), 3);
        let empty = c.predict_proba("");
        assert_eq!(rec.entries[1].p_red, empty[c.label_index("Adware").unwrap()]);
        let single = mfs_k(c, &a, &o, 1).unwrap();
        assert_eq!(single, rec.entries[0]);
    }

    #[test]
    fn removing_empty_descriptors_changes_nothing() {
        let c = trained();
        let a = apk("x", &["f1", "f2", "f3"]);
        let mut o = vec![
            output("x", "f1", "", 9.0),
            output("x", "f2", "read buffer adpopup", 2.0),
            output("x", "f3", "", 8.0),
        ];
        for x in &mut o {
            if x.summary.is_empty() {
                x.suggested_name = String::new();
            }
        }
        let rec = fidelity_for_app(c, &a, &o, &[2], "m").unwrap();
        assert_eq!(rec.entries[0].mfs, Some(0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn predict_proba_is_a_distribution(words in proptest::collection::vec("[a-z]{1,10}|adpopup|rootexec|read", 0..40)) {
            let p = trained().predict_proba(&words.join(" "));
            prop_assert_eq!(p.len(), 4);
            prop_assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn mfs_never_exceeds_one(p_full in 1e-9f64..1.0, p_red in 0.0f64..1.0) {
            prop_assert!(relative_drop(p_full, p_red).unwrap() <= 1.0);
        }
    }
}
