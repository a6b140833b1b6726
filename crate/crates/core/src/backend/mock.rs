//! Seeded deterministic stand-in for a model endpoint.
//!
//! Responses follow the requested output shapes so the parsers and every
//! metric see realistic text:
//!
//! * function prompts: summary names the most frequent identifiers in the
//!   code, the name is the camel-cased top identifier, and the score is
//!   `hash(seed, code) mod 11` unless the code carries a `//MAL:<n>` marker;
//! * descriptor prompts: a score inside the risk band the summary states;
//! * name prompts: the camel-cased first identifier of the summary, with a
//!   hash-selected `handle` prefix on some inputs;
//! * app prompts: a description starting with the required prefix that
//!   lists the identifiers mentioned by the selected summaries.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::prompt::{format_score, render_structured_response, PromptKind, PromptText};
use crate::text::stable_hash64;

const STOPWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const",
    "continue", "default", "double", "else", "enum", "extends", "false", "final", "finally",
    "float", "for", "goto", "if", "implements", "import", "instanceof", "int", "interface", "long",
    "native", "new", "null", "package", "private", "protected", "public", "return", "short",
    "static", "strictfp", "super", "switch", "synchronized", "this", "throw", "throws",
    "transient", "true", "try", "void", "volatile", "while", "var", "String", "Object", "MAL",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockModel {
    pub seed: u64,
}

fn ident_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z_$][A-Za-z0-9_$]*").expect("ident regex"))
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"//\s*MAL:\s*(\d+(?:\.\d+)?)").expect("marker regex"))
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(match rest.find(end) {
        Some(i) => &rest[..i],
        None => rest,
    })
}

/// Most frequent identifiers (length >= 3, keywords excluded); ties by name.
pub fn salient_identifiers(code: &str, limit: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in ident_re().find_iter(code) {
        let w = m.as_str();
        if w.len() >= 3 && !STOPWORDS.contains(&w) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(limit).map(|(w, _)| w.to_string()).collect()
}

/// `snake_case`, `$inner` or `UpperCamel` to `lowerCamel`.
pub fn camel_case(ident: &str) -> String {
    let mut out = String::new();
    for (i, part) in ident.split(['_', '$']).filter(|p| !p.is_empty()).enumerate() {
        let mut chars = part.chars();
        let first = chars.next().expect("non-empty part");
        if i == 0 {
            out.extend(first.to_lowercase());
        } else {
            out.extend(first.to_uppercase());
        }
        out.push_str(chars.as_str());
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn band(score: f64) -> &'static str {
    if score <= 3.0 {
        "low"
    } else if score <= 6.0 {
        "moderate"
    } else {
        "high"
    }
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Identifiers listed after "Handles " in a mock summary.
fn summary_identifiers(summary: &str) -> Vec<String> {
    let list = between(summary, "Handles ", ";").unwrap_or("");
    ident_re().find_iter(list).map(|m| m.as_str()).filter(|w| *w != "and").map(str::to_string).collect()
}

impl MockModel {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn hash(&self, tag: &str, text: &str) -> u64 {
        let mut buf = self.seed.to_le_bytes().to_vec();
        buf.extend_from_slice(tag.as_bytes());
        buf.push(0);
        buf.extend_from_slice(text.as_bytes());
        stable_hash64(&buf)
    }

    pub fn respond(&self, prompt: &PromptText) -> String {
        match prompt.kind {
            PromptKind::FunctionSummarization => {
                let code = between(&prompt.text, "[FUNC]\n", "\n[/FUNC]").unwrap_or(&prompt.text);
                self.summarize(code)
            }
            PromptKind::DescriptorScore => {
                let d = between(&prompt.text, "A function descriptor: ", "\nOutput:")
                    .unwrap_or(&prompt.text);
                format!("Malicious Score(0-10): {}", self.descriptor_score(d))
            }
            PromptKind::NameRegen => {
                let s = between(&prompt.text, "A function summary: ", "\nOutput:")
                    .unwrap_or(&prompt.text);
                format!("Suggested Function Name: {}", self.regen_name(s))
            }
            PromptKind::AppPurpose => self.describe(&prompt.text),
        }
    }

    pub fn code_score(&self, code: &str) -> f64 {
        if let Some(n) = marker_re()
            .captures(code)
            .and_then(|c| c[1].parse::<f64>().ok())
        {
            return n.min(10.0);
        }
        (self.hash("code", code) % 11) as f64
    }

    fn summarize(&self, code: &str) -> String {
        let score = self.code_score(code);
        let salient = salient_identifiers(code, 3);
        let summary = if salient.is_empty() {
            format!("Performs no notable operation; risk appears {}.", band(score))
        } else {
            format!("Handles {}; risk appears {}.", join_list(&salient), band(score))
        };
        let name = salient.first().map(|s| camel_case(s)).filter(|s| !s.is_empty());
        render_structured_response(&summary, name.as_deref().unwrap_or("processData"), score)
    }

    fn descriptor_score(&self, descriptor: &str) -> String {
        let (lo, hi) = if descriptor.contains("risk appears high") {
            (7, 10)
        } else if descriptor.contains("risk appears moderate") {
            (4, 6)
        } else if descriptor.contains("risk appears low") {
            (0, 3)
        } else {
            (0, 10)
        };
        let v = lo + self.hash("descriptor", descriptor) % (hi - lo + 1);
        format_score(v as f64)
    }

    fn regen_name(&self, summary: &str) -> String {
        let base = summary_identifiers(summary)
            .into_iter()
            .next()
            .or_else(|| {
                ident_re()
                    .find_iter(summary)
                    .map(|m| m.as_str().to_string())
                    .find(|w| w.len() >= 3)
            })
            .map(|w| camel_case(&w))
            .filter(|w| !w.is_empty())
            .unwrap_or_else(|| "processData".into());
        if self.hash("regen", summary).is_multiple_of(4) {
            format!("handle{}", capitalize(&base))
        } else {
            base
        }
    }

    fn describe(&self, prompt: &str) -> String {
        let mut tokens: Vec<String> = Vec::new();
        let mut names = Vec::new();
        let mut max_score = 0.0f64;
        for line in prompt.lines() {
            if let Some(s) = line.strip_prefix("Function Summary: ") {
                for t in summary_identifiers(s) {
                    if !tokens.contains(&t) {
                        tokens.push(t);
                    }
                }
            } else if let Some(n) = line.strip_prefix("Refined Function Name: ") {
                names.push(n.trim().to_string());
            } else if let Some(m) = line.strip_prefix("Maliciousness Score: ") {
                if let Ok(v) = m.trim().parse::<f64>() {
                    max_score = max_score.max(v);
                }
            }
        }
        tokens.truncate(6);
        names.truncate(3);
        if tokens.is_empty() {
            return "This application appears to perform routine operations with no clear malicious intent."
                .to_string();
        }
        format!(
            "This application appears to handle {} through functions such as {}. Its most suspicious behavior is rated {} out of 10.",
            join_list(&tokens),
            join_list(&names),
            format_score(max_score)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FunctionKey;
    use crate::prompt::{parse_name_response, parse_score_response, parse_structured_output, PromptBuilder, StructuredOutput};

    fn function_prompt(code: &str) -> PromptText {
        let f = crate::corpus::FunctionRecord {
            function_id: "f".into(),
            apk_id: "a".into(),
            class_name: "C".into(),
            original_name: "a".into(),
            signature: "()V".into(),
            code: code.into(),
            token_estimate: 1,
        };
        PromptBuilder::default().build_function_prompt(&f).unwrap()
    }

    #[test]
    fn salient_ranking() {
        let code = "void a(String imei) { sendImei(imei); sendImei(imei); log(x); }";
        assert_eq!(salient_identifiers(code, 3), vec!["imei", "sendImei", "log"]);
    }

    #[test]
    fn camel_casing() {
        assert_eq!(camel_case("send_sms_now"), "sendSmsNow");
        assert_eq!(camel_case("UploadTask"), "uploadTask");
        assert_eq!(camel_case("a$b"), "aB");
    }

    #[test]
    fn marker_overrides_hash_and_output_parses() {
        let m = MockModel::new(3);
        let raw = m.respond(&function_prompt("void run() { zqBeacon(); zqBeacon(); } //MAL:9"));
        let o = parse_structured_output(&raw, &FunctionKey::new("a", "f"), "m").unwrap();
        assert_eq!(o.maliciousness, 9.0);
        assert_eq!(o.suggested_name, "zqBeacon");
        assert!(o.summary.contains("zqBeacon"));
        assert!(o.summary.ends_with("risk appears high."));
    }

    #[test]
    fn hash_score_in_range_and_seed_dependent() {
        let p = function_prompt("int add(int lhs, int rhs) { return lhs + rhs; }");
        let scores: Vec<f64> = (0..32)
            .map(|seed| {
                let raw = MockModel::new(seed).respond(&p);
                parse_structured_output(&raw, &FunctionKey::new("a", "f"), "m").unwrap().maliciousness
            })
            .collect();
        assert!(scores.iter().all(|s| (0.0..=10.0).contains(s) && s.fract() == 0.0));
        assert!(scores.iter().any(|s| *s != scores[0]));
    }

    #[test]
    fn follow_up_prompts_parse() {
        let m = MockModel::new(1);
        let b = PromptBuilder::default();
        let o = StructuredOutput {
            apk_id: "a".into(),
            function_id: "f".into(),
            model_id: "m".into(),
            summary: "Handles zqBeacon, imei and httpPost; risk appears high.".into(),
            suggested_name: "zqBeacon".into(),
            maliciousness: 9.0,
            raw_response: String::new(),
            parse_warnings: vec![],
        };
        let (score, _) = parse_score_response(&m.respond(&b.build_descriptor_score_prompt(&o.descriptor()))).unwrap();
        assert!((7.0..=10.0).contains(&score));
        let (name, _) = parse_name_response(&m.respond(&b.build_name_regen_prompt(&o.summary))).unwrap();
        assert!(name == "zqBeacon" || name == "handleZqBeacon", "{name}");
        let desc = m.respond(&b.build_app_purpose_prompt(&[o]));
        assert!(desc.starts_with("This application appears to handle zqBeacon, imei and httpPost"));
    }
}
