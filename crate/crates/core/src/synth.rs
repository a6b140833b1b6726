//! Seeded synthetic corpus with planted ground truth.
//!
//! Every APK carries a few malicious functions built around a token unique to
//! its category and marked `//MAL:9` or `//MAL:10`; the remaining functions
//! draw from a vocabulary shared by all categories and are marked 0 to 3.
//! With the mock backend this makes classes separable exactly through the
//! highest-scored functions.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, CorpusOptions, FunctionLine, ManifestEntry};
use crate::error::Result;

pub struct PlantedCategory {
    pub name: &'static str,
    pub token: &'static str,
    pub helper: &'static str,
    pub reference: &'static str,
}

pub const CATEGORIES: [PlantedCategory; 4] = [
    PlantedCategory {
        name: "Adware",
        token: "adInjector",
        helper: "bannerSlot",
        reference: "This application appears to handle adInjector payloads that push intrusive advertisements and fake clicks.",
    },
    PlantedCategory {
        name: "Banker",
        token: "overlayPhisher",
        helper: "credentialForm",
        reference: "This application appears to handle overlayPhisher screens that steal banking credentials from the user.",
    },
    PlantedCategory {
        name: "SMSFraud",
        token: "premiumSender",
        helper: "shortCode",
        reference: "This application appears to handle premiumSender routines that send premium SMS messages without consent.",
    },
    PlantedCategory {
        name: "Spyware",
        token: "contactHarvester",
        helper: "uploadQueue",
        reference: "This application appears to handle contactHarvester jobs that collect contacts and upload them to a remote server.",
    },
];

const SHARED: [&str; 12] = [
    "bufferSize", "viewHolder", "layoutParams", "cacheEntry", "listAdapter", "configValue",
    "stringBuilder", "eventQueue", "timerTask", "fileStream", "themeColor", "scrollState",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub seed: u64,
    pub apks_per_category: usize,
    pub min_functions: usize,
    pub max_functions: usize,
    pub planted_per_apk: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { seed: 7, apks_per_category: 6, min_functions: 7, max_functions: 10, planted_per_apk: 2 }
    }
}

fn obfuscated_name(i: usize) -> String {
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    if i < 26 {
        (letters[i] as char).to_string()
    } else {
        format!("{}{}", letters[i / 26 - 1] as char, letters[i % 26] as char)
    }
}

fn planted_code(name: &str, cat: &PlantedCategory, score: u32, rng: &mut ChaCha8Rng) -> String {
    let word = SHARED.choose(rng).expect("shared vocabulary");
    let t = cat.token;
    format!(
        "public void {name}(Context context) {{\n    Object {t} = Loader.get(context, \"{t}\");\n    {t}.start();\n    {t}.attach(this.{h});\n    if ({t}.ready()) {{\n        {t}.run({word});\n    }}\n}} //MAL:{score}",
        h = cat.helper
    )
}

fn benign_code(name: &str, callee: Option<&str>, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = SHARED.choose_multiple(rng, 3).copied().collect();
    let score = rng.random_range(0..=3);
    let call = callee.map(|c| format!("\n    this.{c}();")).unwrap_or_default();
    format!(
        "public int {name}(int i) {{\n    int {a} = this.{a} + i;\n    {b}.update({a});\n    {c}.reset();\n    {a} = {a} * 2;{call}\n    return {a};\n}} //MAL:{score}",
        a = words[0],
        b = words[1],
        c = words[2],
    )
}

/// `CATEGORIES.len() * apks_per_category` APKs with references.
pub fn planted_corpus(opts: SynthOptions) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut manifest = Vec::new();
    let mut functions = Vec::new();
    for cat in &CATEGORIES {
        for i in 0..opts.apks_per_category {
            let apk_id = format!("synth-{}-{:02}", cat.name.to_lowercase(), i + 1);
            let n = rng.random_range(opts.min_functions..=opts.max_functions).max(opts.planted_per_apk);
            let planted: Vec<usize> = rand::seq::index::sample(&mut rng, n, opts.planted_per_apk).into_vec();
            let names: Vec<String> = (0..n).map(obfuscated_name).collect();
            for j in 0..n {
                let code = if let Some(p) = planted.iter().position(|&x| x == j) {
                    planted_code(&names[j], cat, if p % 2 == 0 { 10 } else { 9 }, &mut rng)
                } else {
                    let callee = rng.random_bool(0.3).then(|| names[planted[0]].as_str());
                    benign_code(&names[j], callee, &mut rng)
                };
                functions.push(FunctionLine {
                    apk_id: apk_id.clone(),
                    function_id: format!("f{j:02}"),
                    class_name: format!("com.synth.{}{:02}.a", cat.name.to_lowercase(), i + 1),
                    method_name: names[j].clone(),
                    signature: if planted.contains(&j) { "(Landroid/content/Context;)V".into() } else { "(I)I".into() },
                    code,
                });
            }
            manifest.push(ManifestEntry {
                apk_id,
                category: cat.name.to_string(),
                family: format!("{}-family-{}", cat.name.to_lowercase(), i % 2),
                size_bytes: rng.random_range(200_000..8_000_000),
                method_count: n as u64,
                reference_description: Some(cat.reference.to_string()),
            });
        }
    }
    let mut corpus = Corpus::from_records(manifest, functions, CorpusOptions::default())?;
    corpus.provenance.note = Some(format!("synthetic planted corpus, seed {}", opts.seed));
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::salient_identifiers;
    use crate::corpus::corpus_stats;

    #[test]
    fn default_shape() {
        let c = planted_corpus(SynthOptions::default()).unwrap();
        let s = corpus_stats(&c);
        assert_eq!((s.apks, s.categories), (24, 4));
        assert!((168..=240).contains(&s.functions), "{}", s.functions);
        assert!(c.apks.values().all(|a| a.reference_description.is_some()));
    }

    #[test]
    fn planted_token_is_most_salient() {
        let c = planted_corpus(SynthOptions::default()).unwrap();
        for apk in c.apks.values() {
            let cat = CATEGORIES.iter().find(|k| k.name == apk.category).unwrap();
            let planted: Vec<_> = c.functions_of(&apk.apk_id).filter(|f| f.code.contains(cat.token)).collect();
            assert_eq!(planted.len(), 2);
            for f in planted {
                assert_eq!(salient_identifiers(&f.code, 1), vec![cat.token]);
            }
        }
    }

    #[test]
    fn seeded() {
        let a = planted_corpus(SynthOptions::default()).unwrap();
        let b = planted_corpus(SynthOptions::default()).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = planted_corpus(SynthOptions { seed: 8, ..SynthOptions::default() }).unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }
}
