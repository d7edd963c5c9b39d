use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deminet::data::{synth_generate, FormatSpec, Sample};
use deminet::experiment::{
    ablation_variants, aggregation_variants, comparison_csv, export_interests, load_dataset, load_model,
    prepare_data, run_experiment, run_variants, evaluate_model, tables, ExperimentConfig, LogSource, MetricsRow,
    METRICS_HEADER,
};
use deminet::numerics::op_suite;
use deminet::rng::{self, SeedStreams};
use deminet::training::micro;
use deminet::{Error, Result};

/// Relative error bounds for `gradcheck`.
const OP_TOLERANCE: f64 = 1e-4;
const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "deminet",
    about = "Train, evaluate and ablate DemiNet click-through models",
    after_help = "Any configuration key can also be given as `--key value`, e.g. `--beta 0.2 --dha_off true`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic behavior log with planted interest clusters.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output log, tab separated: user, item, category, timestamp.
        #[arg(long)]
        out: PathBuf,
        /// Optional file for the planted user and item clusters.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Split a log in time, build samples with negatives, and write them.
    PrepareData {
        #[command(flatten)]
        config: ConfigArg,
        /// Behavior log; the synthetic generator is used when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "\t")]
        delimiter: char,
        #[arg(long, default_value_t = 0)]
        user_col: usize,
        #[arg(long, default_value_t = 1)]
        item_col: usize,
        #[arg(long, default_value_t = 2)]
        category_col: usize,
        #[arg(long, default_value_t = 3)]
        timestamp_col: usize,
        #[arg(long)]
        event_col: Option<usize>,
        /// Comma-separated event values counted as clicks.
        #[arg(long, value_delimiter = ',')]
        click_events: Vec<String>,
    },
    /// Train one configuration and write metrics, summary and checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUC and LogLoss of a checkpoint.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test` or `train`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Full model against the dha_off, ssl_off and single_expert ablations.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every aggregation mode on the same data.
    BenchAggregation {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every op and of a complete micro model.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seed: u64,
    },
    /// Write interest vectors and attention rows of a checkpoint.
    ExportInterests {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Export at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
}

/// Pulls `--key value` and `--key=value` pairs for configuration keys out of
/// the arguments. Dashes in keys count as underscores.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.replace('-', "_"), Some(v.to_string())),
            None => (body.replace('-', "_"), None),
        };
        if !ExperimentConfig::KEYS.contains(&key.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.peek() {
                Some(next) if !next.starts_with("--") => it.next().expect("peeked"),
                // a bare flag switches a boolean on
                _ => "true".into(),
            },
        };
        pairs.push((key, value));
    }
    (rest, pairs)
}

fn resolve(config: &ConfigArg, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let base = match &config.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

fn print_row(label: &str, row: &MetricsRow) {
    eprintln!("{label}{}", row.to_csv());
}

fn pick_split(data: deminet::data::Dataset, split: &str) -> Result<Vec<Sample>> {
    match split {
        "test" => Ok(data.test),
        "train" => Ok(data.train),
        other => Err(Error::config(format!("split must be test or train, got {other:?}"))),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<()> {
    match command {
        Command::Synth { config, out, truth } => {
            let cfg = resolve(&config, overrides)?;
            let (log, planted) = synth_generate(&cfg.synth, &mut SeedStreams::new(cfg.seed).stream(rng::SYNTH))?;
            let mut text = String::with_capacity(log.len() * 24);
            for r in &log.records {
                text.push_str(&format!("{}\t{}\t{}\t{}\n", r.user, r.item, r.category, r.timestamp));
            }
            write_file(&out, &text)?;
            if let Some(path) = truth {
                write_file(&path, &planted.to_text())?;
            }
            println!("records={}", log.len());
        }
        Command::PrepareData {
            config,
            input,
            out,
            delimiter,
            user_col,
            item_col,
            category_col,
            timestamp_col,
            event_col,
            click_events,
        } => {
            let cfg = resolve(&config, overrides)?;
            let spec = FormatSpec {
                delimiter,
                user_col,
                item_col,
                category_col,
                timestamp_col,
                event_col,
                click_events,
            };
            let source = match &input {
                Some(path) => LogSource::File(path, &spec),
                None => LogSource::Synthetic(&cfg.synth),
            };
            let manifest = prepare_data(source, cfg.split_fraction, &cfg.sample_config(), cfg.seed, &out)?;
            print!("{}", manifest.to_text());
        }
        Command::Train { config, out } => {
            let cfg = resolve(&config, overrides)?;
            eprintln!("{METRICS_HEADER}");
            let report = run_experiment(&cfg, Some(&out), |row| print_row("", row))?;
            print!("{}", report.summary_text());
        }
        Command::Evaluate {
            config,
            checkpoint,
            split,
        } => {
            let cfg = resolve(&config, overrides)?;
            let data = load_dataset(&cfg)?;
            let t = tables(&data.vocab);
            let samples = pick_split(data, &split)?;
            let model = load_model(&cfg, t, &checkpoint)?;
            let (auc, logloss) = evaluate_model(&model, &samples)?;
            println!("auc={auc:.6}\nlogloss={logloss:.6}\nsamples={}", samples.len());
        }
        Command::Ablate { config, out } => {
            let cfg = resolve(&config, overrides)?;
            let results = run_variants(&ablation_variants(&cfg), Some((&out, "ablation")), |name, row| {
                print_row(&format!("{name},"), row)
            })?;
            print!("{}", comparison_csv(&results));
        }
        Command::BenchAggregation { config, out } => {
            let cfg = resolve(&config, overrides)?;
            let results = run_variants(&aggregation_variants(&cfg), Some((&out, "aggregation")), |name, row| {
                print_row(&format!("{name},"), row)
            })?;
            print!("{}", comparison_csv(&results));
        }
        Command::Gradcheck { seed } => {
            let mut worst_op: f64 = 0.0;
            for (name, err) in op_suite(seed)? {
                println!("op {name} {err:.3e}");
                worst_op = worst_op.max(err);
            }
            let mut worst_model: f64 = 0.0;
            for samples in [1, 2] {
                let err = micro::gradient_error(samples, seed)?;
                println!("model samples={samples} {err:.3e}");
                worst_model = worst_model.max(err);
            }
            println!("max_op_error={worst_op:.3e}\nmax_model_error={worst_model:.3e}");
            if !(worst_op < OP_TOLERANCE && worst_model < MODEL_TOLERANCE) {
                return Err(deminet::numerics::NumericsError::Contract(format!(
                    "gradient check failed: op {worst_op:.3e} (limit {OP_TOLERANCE:e}), model {worst_model:.3e} (limit {MODEL_TOLERANCE:e})"
                ))
                .into());
            }
        }
        Command::ExportInterests {
            config,
            checkpoint,
            out,
            split,
            limit,
        } => {
            let cfg = resolve(&config, overrides)?;
            let data = load_dataset(&cfg)?;
            let t = tables(&data.vocab);
            let vocab = data.vocab.clone();
            let mut samples = pick_split(data, &split)?;
            if let Some(n) = limit {
                samples.truncate(n);
            }
            let model = load_model(&cfg, t, &checkpoint)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut w = BufWriter::new(File::create(&out)?);
            let rows = export_interests(&model, &samples, Some(&vocab), &mut w)?;
            w.flush()?;
            println!("rows={rows}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
