//! Aggregation of per-app records into model × metric tables, relative
//! change rows, and maliciousness-score histograms.

use std::fmt::Write as _;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyRecord;
use crate::error::{Error, Result};
use crate::fidelity::FidelityRecord;
use crate::prompt::StructuredOutput;
use crate::semantic::SemanticRecord;

pub const GROUP_CONSISTENCY: &str = "Consistency";
pub const GROUP_FIDELITY: &str = "Fidelity";
pub const GROUP_SEMANTIC: &str = "Semantic Relevance";
const GROUPS: [&str; 3] = [GROUP_CONSISTENCY, GROUP_FIDELITY, GROUP_SEMANTIC];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    /// Table row, usually the model id (a renamed condition gets its own row).
    pub row: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Records left out because the metric was undefined for them.
    #[serde(default)]
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCell {
    pub row: String,
    pub metric: String,
    pub old_mean: f64,
    pub new_mean: f64,
    /// `None` when the old mean is zero.
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub condition: String,
    pub edges: Vec<u32>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

/// Metric id for MFS at removal size `k`.
pub fn mfs_metric(k: usize) -> String {
    format!("mfs_{k}")
}

pub fn metric_group(metric: &str) -> Option<&'static str> {
    match metric {
        "mcs" | "ncs" => Some(GROUP_CONSISTENCY),
        "bleu" | "meteor" | "rouge_l" => Some(GROUP_SEMANTIC),
        m if m.starts_with("mfs_") => Some(GROUP_FIDELITY),
        _ => None,
    }
}

pub fn metric_label(metric: &str) -> String {
    match metric {
        "mcs" => "MCS".into(),
        "ncs" => "NCS".into(),
        "bleu" => "BLEU".into(),
        "meteor" => "METEOR".into(),
        "rouge_l" => "ROUGE-L".into(),
        m => match m.strip_prefix("mfs_") {
            Some(k) => format!("MFS_({k})"),
            None => m.to_string(),
        },
    }
}

/// Column order: group, then MFS by k, then a fixed order inside groups.
fn metric_sort_key(metric: &str) -> (usize, usize, String) {
    let group = metric_group(metric).and_then(|g| GROUPS.iter().position(|x| *x == g)).unwrap_or(GROUPS.len());
    let within = match metric {
        "mcs" | "bleu" => 0,
        "ncs" | "meteor" => 1,
        "rouge_l" => 2,
        m => m.strip_prefix("mfs_").and_then(|k| k.parse().ok()).unwrap_or(usize::MAX),
    };
    (group, within, metric.to_string())
}

/// Mean and population standard deviation.
pub fn aggregate_mean_std(row: &str, metric: &str, values: &[f64]) -> Result<AggregateCell> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(AggregateCell {
        row: row.to_string(),
        metric: metric.to_string(),
        mean,
        std: var.sqrt(),
        n: values.len(),
        excluded: 0,
    })
}

fn push_cell(cells: &mut Vec<AggregateCell>, row: &str, metric: &str, values: &[f64], excluded: usize) {
    match aggregate_mean_std(row, metric, values) {
        Ok(mut c) => {
            c.excluded = excluded;
            cells.push(c);
        }
        Err(_) => warn!("{row}: no defined values for {metric}; cell omitted"),
    }
}

pub fn consistency_cells(row: &str, records: &[ConsistencyRecord]) -> Vec<AggregateCell> {
    let mut cells = Vec::new();
    let mcs: Vec<f64> = records.iter().map(|r| r.mcs).collect();
    let ncs: Vec<f64> = records.iter().map(|r| r.ncs_mean).collect();
    push_cell(&mut cells, row, "mcs", &mcs, 0);
    push_cell(&mut cells, row, "ncs", &ncs, 0);
    cells
}

/// One cell per k; undefined entries are counted in `excluded`.
pub fn fidelity_cells(row: &str, records: &[FidelityRecord]) -> Vec<AggregateCell> {
    let mut ks: Vec<usize> = records.iter().flat_map(|r| r.entries.iter().map(|e| e.k)).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut cells = Vec::new();
    for k in ks {
        let entries = records.iter().flat_map(|r| r.entries.iter().filter(move |e| e.k == k));
        let (defined, undefined): (Vec<_>, Vec<_>) = entries.partition(|e| e.mfs.is_some());
        let values: Vec<f64> = defined.iter().filter_map(|e| e.mfs).collect();
        push_cell(&mut cells, row, &mfs_metric(k), &values, undefined.len());
    }
    cells
}

pub fn semantic_cells(row: &str, records: &[SemanticRecord]) -> Vec<AggregateCell> {
    let mut cells = Vec::new();
    for (metric, get) in [
        ("bleu", (|r: &SemanticRecord| r.bleu) as fn(&SemanticRecord) -> f64),
        ("meteor", |r| r.meteor),
        ("rouge_l", |r| r.rouge_l),
    ] {
        let values: Vec<f64> = records.iter().map(get).collect();
        push_cell(&mut cells, row, metric, &values, 0);
    }
    cells
}

/// Percent change from `old` to `new`; undefined when `old` is zero.
pub fn relative_change_percent(old: f64, new: f64) -> Option<f64> {
    (old != 0.0).then(|| (new - old) / old * 100.0)
}

pub fn format_percent(p: Option<f64>) -> String {
    match p {
        Some(p) => format!("{p:+.2}%"),
        None => "n/a".to_string(),
    }
}

/// Bins `[0,1), [1,2), ..., [9,10]`; out-of-range scores are clamped.
pub fn score_histogram(scores: impl IntoIterator<Item = f64>, condition: &str) -> Histogram {
    let mut counts = vec![0usize; 10];
    for s in scores {
        let clamped = if s.is_nan() { 0.0 } else { s.clamp(0.0, 10.0) };
        if clamped != s {
            warn!("score {s} outside [0, 10] counted as {clamped}");
        }
        counts[(clamped.floor() as usize).min(9)] += 1;
    }
    Histogram { condition: condition.to_string(), edges: (0..=10).collect(), counts }
}

pub fn output_histogram(outputs: &[StructuredOutput], condition: &str) -> Histogram {
    score_histogram(outputs.iter().map(|o| o.maliciousness), condition)
}

pub fn histogram_csv(histograms: &[Histogram]) -> String {
    let mut out = String::from("condition,bin_lower,bin_upper,count\n");
    for h in histograms {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{c}", csv_field(&h.condition), h.edges[i], h.edges[i + 1]);
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.3}")
}

#[derive(Serialize)]
struct JsonReport<'a> {
    cells: &'a [AggregateCell],
    deltas: &'a [DeltaCell],
    histograms: &'a [Histogram],
}

pub fn render_report(
    cells: &[AggregateCell],
    histograms: &[Histogram],
    deltas: &[DeltaCell],
    format: ReportFormat,
) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&JsonReport { cells, deltas, histograms })?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => render_csv(cells, deltas),
        ReportFormat::Markdown => render_markdown(cells, histograms, deltas),
    })
}

pub fn render_report_str(
    cells: &[AggregateCell],
    histograms: &[Histogram],
    deltas: &[DeltaCell],
    format: &str,
) -> Result<String> {
    render_report(cells, histograms, deltas, format.parse()?)
}

fn render_csv(cells: &[AggregateCell], deltas: &[DeltaCell]) -> String {
    let mut out = String::from("kind,row,group,metric,mean,std,n,excluded,old_mean,percent_change\n");
    for c in cells {
        let _ = writeln!(
            out,
            "cell,{},{},{},{},{},{},{},,",
            csv_field(&c.row),
            csv_field(metric_group(&c.metric).unwrap_or("")),
            csv_field(&c.metric),
            c.mean,
            c.std,
            c.n,
            c.excluded
        );
    }
    for d in deltas {
        let _ = writeln!(
            out,
            "delta,{},{},{},{},,,,{},{}",
            csv_field(&d.row),
            csv_field(metric_group(&d.metric).unwrap_or("")),
            csv_field(&d.metric),
            d.new_mean,
            d.old_mean,
            d.percent.map(|p| p.to_string()).unwrap_or_default()
        );
    }
    out
}

fn ordered_unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = Vec::new();
    for i in items {
        if !seen.contains(&i) {
            seen.push(i);
        }
    }
    seen
}

fn render_markdown(cells: &[AggregateCell], histograms: &[Histogram], deltas: &[DeltaCell]) -> String {
    let mut metrics = ordered_unique(cells.iter().map(|c| c.metric.as_str()).chain(deltas.iter().map(|d| d.metric.as_str())));
    metrics.sort_by_key(|m| metric_sort_key(m));
    let show_excluded = cells.iter().any(|c| c.excluded > 0);

    let mut out = String::new();
    let mut group_row = vec!["Model".to_string()];
    let mut label_row = vec![String::new()];
    let mut last_group = None;
    for m in &metrics {
        let g = metric_group(m).unwrap_or("Other");
        group_row.push(if last_group == Some(g) { String::new() } else { g.to_string() });
        last_group = Some(g);
        label_row.push(metric_label(m));
    }
    if show_excluded {
        group_row.push("Excluded".into());
        label_row.push(String::new());
    }
    let sep = vec!["---".to_string(); group_row.len()];
    for row in [&group_row, &sep, &label_row] {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }

    for row in ordered_unique(cells.iter().map(|c| c.row.as_str())) {
        let mut line = vec![row.to_string()];
        let mut excluded = 0;
        for m in &metrics {
            match cells.iter().find(|c| c.row == row && c.metric == *m) {
                Some(c) => {
                    excluded = excluded.max(c.excluded);
                    line.push(format!("{} ± {}", fmt_num(c.mean), fmt_num(c.std)));
                }
                None => line.push("-".into()),
            }
        }
        if show_excluded {
            line.push(excluded.to_string());
        }
        let _ = writeln!(out, "| {} |", line.join(" | "));
    }
    for row in ordered_unique(deltas.iter().map(|d| d.row.as_str())) {
        let mut line = vec![row.to_string()];
        for m in &metrics {
            match deltas.iter().find(|d| d.row == row && d.metric == *m) {
                Some(d) => line.push(format!("{} ({})", fmt_num(d.new_mean), format_percent(d.percent))),
                None => line.push("-".into()),
            }
        }
        if show_excluded {
            line.push(String::new());
        }
        let _ = writeln!(out, "| {} |", line.join(" | "));
    }

    if !histograms.is_empty() {
        out.push_str("\nMaliciousness score histogram\n\n");
        let mut header = vec!["Bin".to_string()];
        header.extend(histograms.iter().map(|h| h.condition.clone()));
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "| {} |", vec!["---"; header.len()].join(" | "));
        for i in 0..10 {
            let close = if i == 9 { ']' } else { ')' };
            let mut line = vec![format!("[{}, {}{close}", i, i + 1)];
            line.extend(histograms.iter().map(|h| h.counts[i].to_string()));
            let _ = writeln!(out, "| {} |", line.join(" | "));
        }
    }
    out
}
