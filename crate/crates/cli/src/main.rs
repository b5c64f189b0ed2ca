//! `csshap`: simulate or ingest data, train a classifier, attribute its
//! predictions in five signal domains and collate the results.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 run or training
//! failure, 4 i/o failure.

mod commands;
mod config;
mod error;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csshap::dataset::Split;
use csshap::domains::DomainKind;
use log::info;

use crate::commands::{DATASET_DIR, MODEL_DIR, MODEL_FILE};
use crate::config::{IngestFormat, LabeledFile, RunConfig};
use crate::error::{validation, CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "csshap", version, about = "Cyclic-spectral Shapley attribution for vibration classifiers")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random stream (overrides all seeds in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the three-class benchmark dataset into <out>/dataset.
    Simulate {
        #[arg(long)]
        samples_per_class: Option<usize>,
    },
    /// Cut labelled recordings into fixed-length segments in <out>/dataset.
    Ingest(IngestArgs),
    /// Train a classifier on a dataset directory into <out>/model.
    Train {
        /// Dataset directory [default: <out>/dataset].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Attribute the model's class probabilities on selected samples.
    Attribute(AttributeArgs),
    /// Write <run>/report.md from whatever outputs exist.
    Report {
        /// Run directory [default: <out>].
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// LABEL=PATH, repeatable; replaces `ingest.files`.
    #[arg(long = "input", value_name = "LABEL=PATH")]
    inputs: Vec<String>,
    #[arg(long, value_enum)]
    format: Option<IngestFormat>,
    #[arg(long)]
    segment_length: Option<usize>,
    #[arg(long)]
    sample_rate: Option<f64>,
    /// 0-based CSV column.
    #[arg(long)]
    column: Option<usize>,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    /// Model file [default: <out>/model/model.bin].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory [default: <out>/dataset].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Domain name or `all`, repeatable.
    #[arg(long = "domain")]
    domains: Vec<String>,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Position within the split, repeatable.
    #[arg(long = "sample")]
    samples: Vec<usize>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    background_size: Option<usize>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected train or test, got {s:?}")),
    }
}

fn parse_labeled(s: &str) -> CliResult<LabeledFile> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok(LabeledFile {
            label: label.to_string(),
            path: PathBuf::from(path),
        }),
        _ => validation(format!("expected LABEL=PATH, got {s:?}")),
    }
}

fn parse_domains(names: &[String]) -> CliResult<Vec<DomainKind>> {
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(DomainKind::ALL);
        } else {
            out.push(n.parse()?);
        }
    }
    out.dedup();
    Ok(out)
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.resolve_seeds(cli.seed);
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli)?;
    if let Some(j) = cli.jobs {
        if j == 0 {
            return validation("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { samples_per_class } => {
            if let Some(n) = samples_per_class {
                cfg.dataset.samples_per_class = n;
            }
            let dir = commands::simulate(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Ingest(a) => {
            if !a.inputs.is_empty() {
                cfg.ingest.files = a.inputs.iter().map(|s| parse_labeled(s)).collect::<CliResult<_>>()?;
            }
            if let Some(f) = a.format {
                cfg.ingest.format = f;
            }
            if let Some(n) = a.segment_length {
                cfg.ingest.segment_length = n;
            }
            if let Some(fs) = a.sample_rate {
                cfg.ingest.sample_rate_hz = fs;
            }
            if let Some(c) = a.column {
                cfg.ingest.column = c;
            }
            if a.no_header {
                cfg.ingest.header = false;
            }
            let dir = commands::ingest(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Train { data, epochs } => {
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            let data = data.unwrap_or_else(|| cfg.out.join(DATASET_DIR));
            let path = commands::train_model(&cfg, &data)?;
            println!("{}", path.display());
        }
        Command::Attribute(a) => {
            if !a.domains.is_empty() {
                cfg.explain.domains = parse_domains(&a.domains)?;
            }
            if let Some(s) = a.split {
                cfg.explain.split = s;
            }
            if !a.samples.is_empty() {
                cfg.explain.samples = a.samples;
            }
            if let Some(p) = a.permutations {
                cfg.attribution.permutations = p;
            }
            if let Some(b) = a.background_size {
                cfg.attribution.background_size = b;
            }
            let model = a.model.unwrap_or_else(|| cfg.out.join(MODEL_DIR).join(MODEL_FILE));
            let data = a.data.unwrap_or_else(|| cfg.out.join(DATASET_DIR));
            for dir in commands::attribute_samples(&cfg, &model, &data)? {
                println!("{}", dir.display());
            }
        }
        Command::Report { run } => {
            let run = run.unwrap_or_else(|| cfg.out.clone());
            let path = report::report(&run)?;
            info!("wrote {}", path.display());
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("csshap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
