use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use malbench_core::config::{MetricFamilies, RunConfig};
use malbench_core::corpus::{corpus_stats, dedupe_category_wise_bucketed, load_corpus_with, Corpus, CorpusOptions};
use malbench_core::pipeline::{self, Run, StageSummary};
use malbench_core::report::ReportFormat;
use malbench_core::synth::{planted_corpus, SynthOptions};

#[derive(Parser)]
#[command(name = "malbench", version, about = "Benchmark code language models on decompiled Android malware")]
struct Cli {
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Evaluate only this backend id.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Comma-separated MFS removal sizes, e.g. 2,5,8.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Report format: md, csv or json.
    #[arg(long, global = true, default_value = "md")]
    format: String,
    /// Seed for splits and synthetic corpora; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Response cache directory; overrides the config.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    functions: Option<PathBuf>,
}

#[derive(Args)]
struct FamilyArg {
    /// Compute a single metric family: consistency, fidelity or semantic.
    #[arg(long)]
    only: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate corpus files and optionally write canonical copies.
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop APKs that share category, method count and (bucketed) size.
    Dedupe {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
        /// Size bucket width in bytes; 0 compares sizes exactly.
        #[arg(long, default_value_t = 0)]
        bucket_bytes: u64,
    },
    /// Structured output (summary, name, score) per function.
    Annotate,
    /// Score each function from its descriptor alone.
    ScoreDescriptors,
    /// Regenerate each name from the model's own summary.
    RegenNames,
    /// App-purpose description per APK from its top-scored functions.
    DescribeApps,
    /// Consistency, fidelity and semantic metrics per app and aggregated.
    Metrics(FamilyArg),
    /// Rename functions with model suggestions and rerun the pipeline.
    RenameExperiment(FamilyArg),
    /// Render the aggregated table and score histograms.
    Report,
    /// Every stage followed by the report.
    Run(FamilyArg),
    /// Write a seeded synthetic corpus and a matching mock config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        apks_per_category: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("this command needs --config")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    if let Some(b) = &cli.backend {
        cfg.models = vec![b.clone()];
    }
    if let Some(k) = &cli.k {
        cfg.k = k.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.cache_dir {
        cfg.cache_dir = Some(dir.clone());
    }
    cfg.validate()?;
    cfg.check_inputs()?;
    Ok(cfg)
}

fn families(cfg: &RunConfig, arg: &FamilyArg) -> Result<MetricFamilies> {
    Ok(match &arg.only {
        Some(name) => MetricFamilies::only(name)?,
        None => cfg.metrics,
    })
}

fn corpus_from(cli: &Cli, args: &CorpusArgs) -> Result<Corpus> {
    let (manifest, functions, cpt) = match (&args.manifest, &args.functions) {
        (Some(m), Some(f)) => (m.clone(), f.clone(), CorpusOptions::default().chars_per_token),
        (None, None) => {
            let cfg = load_config(cli)?;
            (cfg.corpus.manifest, cfg.corpus.functions, cfg.corpus.chars_per_token)
        }
        _ => bail!("pass both --manifest and --functions, or neither and use --config"),
    };
    Ok(load_corpus_with(&manifest, &functions, CorpusOptions { chars_per_token: cpt })?)
}

fn per_model(cfg: &RunConfig, stage: impl Fn(&Run) -> malbench_core::Result<StageSummary>) -> Result<Vec<StageSummary>> {
    cfg.model_ids()
        .iter()
        .map(|m| stage(&Run::original(cfg, m)).with_context(|| format!("model {m}")))
        .collect()
}

fn finish(cfg: &RunConfig, command: &str, stages: &[StageSummary]) -> Result<ExitCode> {
    let manifest = pipeline::write_run_manifest(cfg, command, stages)?;
    for s in stages {
        let who = if s.row.is_empty() { String::new() } else { format!(" [{}]", s.row) };
        println!(
            "{}{who}: {} records, {} errors, {} requests, {} cache hits",
            s.stage, s.records, s.errors, s.requests, s.cache_hits
        );
        for n in &s.notes {
            println!("  {n}");
        }
    }
    if manifest.error_count > 0 {
        eprintln!("{command}: {} recorded errors; see the *_errors.jsonl files", manifest.error_count);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

const SYNTH_CONFIG: &str = r#"output_dir = "out"
cache_dir = "cache"
seed = 7
k = [2, 5, 8]

[corpus]
manifest = "manifest.json"
functions = "functions.jsonl"

[classifier]
accuracy_gate = 0.95

[[backends]]
backend_id = "mock"
kind = "mock"
model_name = "mock-model"
context_tokens = 4096
seed = 7
"#;

fn run(cli: &Cli) -> Result<ExitCode> {
    let format: ReportFormat = cli.format.parse()?;
    match &cli.command {
        Command::Synth { out, apks_per_category } => {
            let opts = SynthOptions {
                seed: cli.seed.unwrap_or(SynthOptions::default().seed),
                apks_per_category: *apks_per_category,
                ..SynthOptions::default()
            };
            let corpus = planted_corpus(opts)?;
            corpus.write(&out.join("manifest.json"), &out.join("functions.jsonl"))?;
            let config_path = out.join("malbench.toml");
            if !config_path.exists() {
                std::fs::write(&config_path, SYNTH_CONFIG)?;
            }
            let s = corpus_stats(&corpus);
            println!("wrote {} APKs, {} functions and {}", s.apks, s.functions, config_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ingest { corpus, out } => {
            let c = corpus_from(cli, corpus)?;
            println!("{}", serde_json::to_string(&corpus_stats(&c))?);
            if let Some(dir) = out {
                c.write(&dir.join("manifest.json"), &dir.join("functions.jsonl"))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Dedupe { corpus, out, bucket_bytes } => {
            let c = corpus_from(cli, corpus)?;
            let kept = dedupe_category_wise_bucketed(&c, *bucket_bytes);
            kept.write(&out.join("manifest.json"), &out.join("functions.jsonl"))?;
            println!("kept {} of {} APKs", kept.apks.len(), c.apks.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Annotate => {
            let cfg = load_config(cli)?;
            finish(&cfg, "annotate", &per_model(&cfg, pipeline::annotate)?)
        }
        Command::ScoreDescriptors => {
            let cfg = load_config(cli)?;
            finish(&cfg, "score-descriptors", &per_model(&cfg, pipeline::score_descriptors)?)
        }
        Command::RegenNames => {
            let cfg = load_config(cli)?;
            finish(&cfg, "regen-names", &per_model(&cfg, pipeline::regen_names)?)
        }
        Command::DescribeApps => {
            let cfg = load_config(cli)?;
            finish(&cfg, "describe-apps", &per_model(&cfg, pipeline::describe_apps)?)
        }
        Command::Metrics(f) => {
            let cfg = load_config(cli)?;
            let fam = families(&cfg, f)?;
            finish(&cfg, "metrics", &per_model(&cfg, |r| pipeline::metrics(r, fam))?)
        }
        Command::RenameExperiment(f) => {
            let cfg = load_config(cli)?;
            let fam = families(&cfg, f)?;
            let mut stages = Vec::new();
            for model in cfg.model_ids() {
                let outcome = pipeline::rename_experiment(&cfg, &model, fam).with_context(|| format!("model {model}"))?;
                let s = &outcome.summary;
                if s.excluded {
                    println!(
                        "{model}: excluded from rename comparison, copy rate {:.2}% above {:.2}%",
                        s.copy_rate * 100.0,
                        s.threshold * 100.0
                    );
                } else {
                    println!("{model}: copy rate {:.2}%, {} of {} functions renamed", s.copy_rate * 100.0, s.applied, s.functions);
                }
                stages.extend(outcome.stages);
            }
            stages.push(pipeline::report(&cfg, format)?);
            finish(&cfg, "rename-experiment", &stages)
        }
        Command::Report => {
            let cfg = load_config(cli)?;
            let s = pipeline::report(&cfg, format)?;
            for file in s.outputs.keys() {
                println!("wrote {}", cfg.output_dir.join(file).display());
            }
            finish(&cfg, "report", &[s])
        }
        Command::Run(f) => {
            let cfg = load_config(cli)?;
            let fam = families(&cfg, f)?;
            let mut stages = Vec::new();
            for model in cfg.model_ids() {
                info!("running every stage for {model}");
                stages.extend(pipeline::run_all(&Run::original(&cfg, &model), fam).with_context(|| format!("model {model}"))?);
            }
            stages.push(pipeline::report(&cfg, format)?);
            finish(&cfg, "run", &stages)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
