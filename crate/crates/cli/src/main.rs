use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ovsfda_core::adaptation::{run_adaptation, write_metrics_csv, AdaptConfig};
use ovsfda_core::harness::{
    generate_synthetic_domains, pretrain_source, report, write_ladder_csv, write_sweep_csv, Benchmark, LabeledSplit,
    PretrainConfig, SyntheticDatasetSpec, SyntheticDomains, CONCEPTS_FILE,
};
use ovsfda_core::model::checkpoint::Checkpoint;
use ovsfda_core::model::Vocabulary;
use ovsfda_core::vocab_align::ConceptMap;

/// Source-free adaptation of a toy open-vocabulary segmenter on a synthetic
/// domain-shift benchmark.
#[derive(Parser)]
#[command(name = "ovsfda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target splits into a directory.
    GenData {
        /// Dataset spec JSON; the built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a source model on the labeled source split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source checkpoint to the unlabeled target split.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Adaptation config JSON; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Concept file; falls back to `concepts_path` in the config.
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the six-row ablation ladder and write a CSV table.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep top-k sizes and random-replacement fractions.
    SweepTopk {
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        random_fractions: Vec<f64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// Target validation split.
    Val,
    Source,
    SourceVal,
}

fn adapt_config(path: Option<&Path>) -> Result<AdaptConfig> {
    match path {
        Some(p) => Ok(AdaptConfig::load(p)?),
        None => Ok(AdaptConfig::desk()),
    }
}

/// Explicit file, then the config's `concepts_path`, then `fallback`.
fn concepts(explicit: Option<&Path>, cfg: &AdaptConfig, fallback: Option<&Path>) -> Result<ConceptMap> {
    match explicit.or(cfg.concepts_path.as_deref()).or(fallback) {
        Some(p) => Ok(ConceptMap::load(p)?),
        None => Ok(ConceptMap::default()),
    }
}

fn load_data(dir: &Path) -> Result<SyntheticDomains> {
    SyntheticDomains::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_ck(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn target_vocab(ck: &Checkpoint, d: &SyntheticDomains) -> Result<Vocabulary> {
    Ok(Vocabulary::with_default_templates(
        d.spec.target_names(),
        ck.params.config(),
    )?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, seed, out } => {
            let spec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => SyntheticDatasetSpec::default(),
            };
            generate_synthetic_domains(&spec, seed)?.save(&out)?;
            println!("{}", serde_json::json!({ "out": out, "seed": seed }));
        }
        Command::Pretrain { data, config, out } => {
            let cfg = match config {
                Some(p) => PretrainConfig::load(p)?,
                None => PretrainConfig::default(),
            };
            let d = load_data(&data)?;
            let (ck, losses) = pretrain_source(&d.source, &d.spec.source_names(), &cfg)?;
            ck.save(&out)?;
            println!("{}", serde_json::json!({ "out": out, "losses": losses }));
        }
        Command::Adapt {
            checkpoint,
            data,
            config,
            concepts: cpath,
            out,
            metrics,
        } => {
            let cfg = adapt_config(config.as_deref())?;
            let cm = concepts(cpath.as_deref(), &cfg, None)?;
            let ck = load_ck(&checkpoint)?;
            let d = load_data(&data)?;
            let vocab = target_vocab(&ck, &d)?;
            let (adapted, steps) = run_adaptation(&ck, &d.target_train.images, &vocab, &cm, &cfg)?;
            adapted.save(&out)?;
            if let Some(m) = metrics {
                write_metrics_csv(&steps, create(&m)?)?;
            }
            println!("{}", serde_json::json!({ "out": out, "iterations": steps.len() }));
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            report: out,
        } => {
            let ck = load_ck(&checkpoint)?;
            let d = load_data(&data)?;
            let (names, labeled): (Vec<String>, &LabeledSplit) = match split {
                Split::Val => (d.spec.target_names(), &d.target_val),
                Split::Source => (d.spec.source_names(), &d.source),
                Split::SourceVal => (d.spec.source_names(), &d.source_val),
            };
            let vocab = Vocabulary::with_default_templates(names, ck.params.config())?;
            let meta = serde_json::to_value(&ck.metadata)?;
            let r = report(&ck, &vocab, labeled, meta, d.seed)?;
            let json = serde_json::to_string_pretty(&r)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, &json)?;
                    println!("{}", serde_json::json!({ "report": p, "miou": r.miou }));
                }
                None => println!("{json}"),
            }
        }
        Command::Ablate {
            checkpoint,
            data,
            config,
            concepts: cpath,
            out,
        } => {
            let cfg = adapt_config(config.as_deref())?;
            let cm = concepts(cpath.as_deref(), &cfg, Some(&data.join(CONCEPTS_FILE)))?;
            let ck = load_ck(&checkpoint)?;
            let d = load_data(&data)?;
            let vocab = target_vocab(&ck, &d)?;
            let bench = Benchmark {
                source: &ck,
                train: &d.target_train,
                val: &d.target_val,
                vocab: &vocab,
                concepts: &cm,
            };
            let rows = bench.run_ablation_ladder(&cfg)?;
            write_ladder_csv(&rows, create(&out)?)?;
            println!("{}", serde_json::json!({ "out": out, "rows": rows.len() }));
        }
        Command::SweepTopk {
            ks,
            random_fractions,
            checkpoint,
            data,
            config,
            concepts: cpath,
            out,
        } => {
            if ks.contains(&0) {
                bail!("--ks values must be positive");
            }
            let cfg = adapt_config(config.as_deref())?;
            let cm = concepts(cpath.as_deref(), &cfg, Some(&data.join(CONCEPTS_FILE)))?;
            let ck = load_ck(&checkpoint)?;
            let d = load_data(&data)?;
            let vocab = target_vocab(&ck, &d)?;
            let bench = Benchmark {
                source: &ck,
                train: &d.target_train,
                val: &d.target_val,
                vocab: &vocab,
                concepts: &cm,
            };
            let points = bench.run_topk_sweep(&cfg, &ks, &random_fractions)?;
            write_sweep_csv(&points, create(&out)?)?;
            println!("{}", serde_json::json!({ "out": out, "points": points.len() }));
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use ovsfda_core::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Shape(_)) => "shape",
        Some(E::Degenerate(_)) => "degenerate",
        Some(E::Validation(_)) => "validation",
        Some(E::Contract(_)) => "contract",
        Some(E::Format(_)) => "format",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        Some(E::Csv(_)) => "csv",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None if e.downcast_ref::<serde_json::Error>().is_some() => "json",
        None => "error",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind().to_string(), "kind": "usage", "message": e.to_string().trim() })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": format!("{e:#}"), "kind": error_kind(&e) })
            );
            ExitCode::FAILURE
        }
    }
}
