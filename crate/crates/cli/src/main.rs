use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cxrfuse::fairness::Axis;
use cxrfuse::learners::ModelKind;
use cxrfuse::pipeline::Strategy;
use cxrfuse::report::Format;
use cxrfuse::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cxrfuse", version, about = "Fusion, evaluation and fairness auditing for binary CXR classifiers")]
struct Cli {
    /// Print machine-readable JSON on stdout (errors as JSON on stderr).
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// `ID=PATH`, or a bare path whose file stem becomes the model id.
#[derive(Debug, Clone)]
pub struct PredArg {
    pub id: String,
    pub path: PathBuf,
}

fn parse_pred(s: &str) -> Result<PredArg, String> {
    match s.split_once('=') {
        Some((id, path)) if !id.is_empty() && !path.is_empty() => Ok(PredArg {
            id: id.to_string(),
            path: path.into(),
        }),
        Some(_) => Err(format!("expected ID=PATH, got '{s}'")),
        None => {
            let path = PathBuf::from(s);
            let id = path
                .file_stem()
                .and_then(|x| x.to_str())
                .ok_or_else(|| format!("cannot derive a model id from '{s}'"))?
                .to_string();
            Ok(PredArg { id, path })
        }
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("invalid ratio '{x}'")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated ratios".to_string())
}

#[derive(Args, Debug)]
struct BootArgs {
    /// Bootstrap resamples.
    #[arg(long, default_value_t = cxrfuse::metrics::DEFAULT_RESAMPLES)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = cxrfuse::metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Run resamples on one thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Equalize and resize a binary PGM image.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = cxrfuse::preprocess::TARGET_SIZE)]
        size: usize,
    },
    /// Derive per-image COPD labels from a diagnoses table.
    Label {
        #[arg(long)]
        diagnoses: PathBuf,
        /// Prefix list of `icd10 J44` lines; defaults to the built-in COPD map.
        #[arg(long)]
        label_map: Option<PathBuf>,
        /// Keep images taken under mechanical ventilation.
        #[arg(long)]
        keep_ventilated: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Assign patients to train, validation and test splits.
    Split {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_ratios, default_value = "0.64,0.16,0.20")]
        ratios: [f64; 3],
        #[arg(long)]
        output: PathBuf,
    },
    /// Class weights of a cohort, or dendrogram weights of prediction sets.
    #[command(group(clap::ArgGroup::new("source").required(true).args(["cohort", "pred"])))]
    Weights {
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Restrict the cohort to one split (needs --splits).
        #[arg(long, requires = "splits")]
        split: Option<cxrfuse::data::Split>,
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Base-model predictions, `ID=PATH`; at least two.
        #[arg(long, value_parser = parse_pred, num_args = 1..)]
        pred: Vec<PredArg>,
    },
    /// Pearson chi-square test of independence.
    Chisq {
        /// Headerless CSV of counts, one table row per line.
        #[arg(long)]
        table: PathBuf,
    },
    /// Fuse base-model predictions and write the test-split scores.
    Fuse {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, value_parser = parse_pred, num_args = 1.., required = true)]
        pred: Vec<PredArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Metrics with bootstrap intervals for one prediction file.
    Eval {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_parser = parse_pred)]
        pred: PredArg,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Per-subgroup AUC of prediction sets, with SD stars.
    Fairness {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        demographics: PathBuf,
        #[arg(long, value_parser = parse_pred, num_args = 1.., required = true)]
        pred: Vec<PredArg>,
        #[arg(long, value_delimiter = ',', default_value = "race_ethnicity,sex,age")]
        axes: Vec<Axis>,
        #[arg(long, default_value_t = cxrfuse::fairness::DEFAULT_MIN_GROUP_SIZE)]
        min_group_size: usize,
        #[arg(long, default_value = "markdown")]
        format: Format,
    },
    /// Retrain a meta-model on shuffled training labels.
    Permtest {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, value_parser = parse_pred, num_args = 1.., required = true)]
        pred: Vec<PredArg>,
        #[arg(long, default_value = "knn")]
        model: ModelKind,
        /// Train on the true labels instead.
        #[arg(long)]
        no_permute: bool,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Write a synthetic site: diagnoses, demographics, features, predictions.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Demographic proportions: mimic or emory.
        #[arg(long, default_value = "mimic")]
        profile: String,
        #[arg(long)]
        site: Option<String>,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Render the metric and fairness tables of a run directory.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: Format,
    },
    /// Full pipeline from a config file (synthetic defaults without one).
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Master seed; overrides the config and the CXRFUSE_SEED variable.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Schema(_) => "schema",
        Error::Data(_) => "data",
        Error::Format(_) => "format",
        Error::Argument(_) => "argument",
        Error::Alignment(_) => "alignment",
        Error::UndefinedMetric(_) => "undefined_metric",
        Error::Computation(_) => "computation",
        Error::Training(_) => "training",
        Error::Degenerate(_) => "degenerate",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli.command) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let body = if cli.json {
                serde_json::to_string_pretty(&out.json).expect("json value") + "\n"
            } else {
                out.text
            };
            let _ = stdout.write_all(body.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            if cli.json {
                let v = serde_json::json!({
                    "error": { "kind": error_kind(&e), "message": e.to_string(), "exit_code": code }
                });
                eprintln!("{v}");
            } else {
                eprintln!("cxrfuse: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}
