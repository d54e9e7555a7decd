//! `ecp`: command-line front end for evidential conformal prediction.
//!
//! On failure every subcommand prints one JSON record
//! `{"error": <kind>, "message": <text>}` to stderr and exits with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use evidential_cp::conformal::{calibrate, predict, CalibrationResult};
use evidential_cp::dataset::{load_json, load_logit_matrix, load_logits, save_json, save_report, ReportFormat, SplitSpec};
use evidential_cp::evidential::Activation;
use evidential_cp::metrics::{
    difficulty_stratified, marginal_coverage, mean_set_size, raps_lambda_search, sat, size_stratified, sscv, Bins,
    LambdaSearch, StratifiedReport, LAMBDA_GRID,
};
use evidential_cp::runner::synth::{synth, SynthConfig};
use evidential_cp::runner::{run_experiment, ExperimentConfig};
use evidential_cp::scores::{fit_temperature, true_label_ranks, Method, RapsParams, ScoreConfig, Temperature};
use evidential_cp::{Error, Result};

#[derive(Parser)]
#[command(name = "ecp", version, about = "Evidential conformal prediction sets from classifier logits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic logit/label pair.
    Synth(SynthArgs),
    /// Calibrate one method on a labelled holdout file.
    Calibrate(CalibrateArgs),
    /// Write prediction sets for a logit file.
    Predict(PredictArgs),
    /// Measure coverage and set-size metrics of a calibration on labelled data.
    Evaluate(EvaluateArgs),
    /// Run the repeated-split protocol from a TOML config.
    Experiment(ExperimentArgs),
    /// Choose the RAPS penalty by smallest SSCV on one split.
    LambdaSearch(LambdaArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Logit matrix (binary or CSV, detected from content).
    #[arg(long)]
    logits: PathBuf,
    /// Label vector matching the logits.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct ScoringArgs {
    #[arg(long, default_value = "ecp")]
    method: Method,
    #[arg(long, default_value = "relu")]
    activation: Activation,
    #[arg(long, default_value_t = 5)]
    k_reg: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Seed for randomized APS/RAPS; deterministic when absent.
    #[arg(long)]
    randomized: Option<u64>,
}

impl ScoringArgs {
    fn config(&self) -> ScoreConfig {
        let mut cfg = ScoreConfig::new(self.method);
        cfg.evidential.activation = self.activation;
        cfg.raps = RapsParams::new(self.k_reg, self.lambda);
        cfg.randomized = self.randomized;
        cfg
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 2.25)]
    separation: f64,
    #[arg(long, default_value_t = 12_000)]
    examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    sharpness: f64,
    /// Output logit path; `.csv` writes text, anything else binary.
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Skip temperature fitting and use the raw logits.
    #[arg(long)]
    no_temperature: bool,
    #[arg(long, default_value = "calibration.json")]
    out: PathBuf,
}

/// What `calibrate` writes and `predict`/`evaluate` read back.
#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    calibration: CalibrationResult,
    scoring: ScoreConfig,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    logits: PathBuf,
    #[arg(long, default_value = "calibration.json")]
    calibration: PathBuf,
    #[arg(long, default_value = "sets.csv")]
    out: PathBuf,
}

#[derive(Serialize)]
struct SetRow {
    row: usize,
    size: usize,
    /// Space-separated label indices.
    labels: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "calibration.json")]
    calibration: PathBuf,
    /// Set-size strata, e.g. `0-1,2-3,4-10`; clipped to the label count.
    #[arg(long)]
    bins: Option<Bins>,
    /// Write the metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Evaluation {
    method: Method,
    delta: f64,
    examples: usize,
    coverage: f64,
    mean_size: f64,
    mean_size_nonempty: Option<f64>,
    sscv: f64,
    sat: Option<f64>,
    size_strata: StratifiedReport,
    difficulty_strata: StratifiedReport,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment description; relative paths resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    logits: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    cal_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    k_reg: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    randomized: Option<u64>,
    /// Set-size strata for both the size report and SSCV/SAT.
    #[arg(long)]
    bins: Option<Bins>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LambdaArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0.3)]
    cal_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    k_reg: usize,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    bins: Option<Bins>,
    #[arg(long)]
    randomized: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => save_json(value, path),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("plain records serialize"));
            Ok(())
        }
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let data = synth(&SynthConfig {
        classes: args.classes,
        separation: args.separation,
        examples: args.examples,
        seed: args.seed,
        sharpness: args.sharpness,
    })?;
    data.write(&args.logits, &args.labels)?;
    println!(
        "wrote {} examples, {} classes, top-1 accuracy {:.4}",
        data.len(),
        data.classes(),
        data.top1_accuracy()
    );
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let data = load_logits(&args.data.logits, &args.data.labels, None)?;
    let scoring = args.scoring.config();
    let temperature = if args.no_temperature {
        Temperature::IDENTITY
    } else {
        fit_temperature(data.logits(), data.labels())?
    };
    let scores = scoring.score(data.logits(), temperature)?;
    let calibration = calibrate(&scores.at_labels(data.labels()), args.delta, scoring.method, temperature)?;
    save_json(&CalibrationFile { calibration: calibration.clone(), scoring }, &args.out)?;
    println!(
        "q_hat {} n {} temperature {:.4}{}",
        calibration.q_hat,
        calibration.n,
        temperature.get(),
        calibration
            .reliability
            .map(|r| format!(" gamma {:.6} u_c {:.3e}", r.gamma, r.u_c))
            .unwrap_or_default()
    );
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let file: CalibrationFile = load_json(&args.calibration)?;
    let logits = load_logit_matrix(&args.logits, None)?;
    let scores = file.scoring.score(logits.view(), file.calibration.temperature)?;
    let sets = evidential_cp::conformal::build_sets(&scores, file.calibration.q_hat);
    let rows: Vec<SetRow> = sets
        .iter()
        .enumerate()
        .map(|(row, set)| SetRow {
            row,
            size: set.len(),
            labels: set.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        })
        .collect();
    save_report(&rows, &args.out, ReportFormat::Csv)
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let file: CalibrationFile = load_json(&args.calibration)?;
    let data = load_logits(&args.data.logits, &args.data.labels, None)?;
    let cal = &file.calibration;
    let scores = file.scoring.score(data.logits(), cal.temperature)?;
    let batch = predict(&scores, cal, data.labels(), true_label_ranks(data.logits(), data.labels()));
    let size_bins = args.bins.unwrap_or_else(Bins::sat_sizes).clip(data.classes());
    let difficulty_bins = Bins::standard_difficulty().clip(data.classes());
    let evaluation = Evaluation {
        method: cal.method,
        delta: cal.delta,
        examples: data.len(),
        coverage: marginal_coverage(&batch),
        mean_size: mean_set_size(&batch, false)?,
        mean_size_nonempty: mean_set_size(&batch, true).ok(),
        sscv: sscv(&batch, &size_bins, cal.delta)?,
        sat: sat(&batch, &size_bins, cal.delta).ok(),
        size_strata: size_stratified(&batch, &size_bins)?,
        difficulty_strata: difficulty_stratified(&batch, &difficulty_bins)?,
    };
    emit(&evaluation, args.out.as_deref())
}

fn toml_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("{}: {e}", path.display()))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| toml_error(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut config.logits, &mut config.labels, &mut config.out] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(config)
}

fn run_experiment_cmd(args: ExperimentArgs) -> Result<()> {
    let mut config = match (&args.config, &args.logits, &args.labels) {
        (Some(path), _, _) => load_config(path)?,
        (None, Some(logits), Some(labels)) => ExperimentConfig::new(logits, labels),
        _ => {
            return Err(Error::InvalidConfig(
                "give --config, or both --logits and --labels".into(),
            ))
        }
    };
    if let Some(v) = args.logits {
        config.logits = v;
    }
    if let Some(v) = args.labels {
        config.labels = v;
    }
    if let Some(v) = args.method {
        config.methods = v;
    }
    if let Some(v) = args.delta {
        config.deltas = v;
    }
    if let Some(v) = args.trials {
        config.trials = v;
    }
    if let Some(v) = args.cal_frac {
        config.calibration_fraction = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.activation {
        config.evidential.activation = v;
    }
    if let Some(v) = args.k_reg {
        config.raps.k_reg = v;
    }
    if let Some(v) = args.lambda {
        config.raps.lambda = v;
    }
    if let Some(v) = args.lambda_grid {
        config.lambda_grid = Some(v);
    }
    if let Some(v) = args.randomized {
        config.randomized = Some(v);
    }
    if let Some(v) = args.bins {
        config.size_bins = v.clone();
        config.sat_bins = v;
    }
    if let Some(v) = args.workers {
        config.workers = v;
    }
    if let Some(v) = args.out {
        config.out = v;
    }
    let report = run_experiment(&config)?;
    for s in &report.summary {
        println!(
            "{:<5} delta {:<5} coverage {:.4} size {:.3} accuracy {:.4}",
            s.method.name(),
            s.delta,
            s.coverage,
            s.mean_size,
            s.accuracy
        );
    }
    println!("reports written to {}", config.out.display());
    Ok(())
}

fn run_lambda_search(args: LambdaArgs) -> Result<()> {
    let data = load_logits(&args.data.logits, &args.data.labels, None)?;
    let split = SplitSpec::new(args.cal_frac, args.seed, 0).split(data.len())?;
    let calibration = data.select(&split.calibration);
    let temperature = fit_temperature(calibration.logits(), calibration.labels())?;
    let grid = args.lambda_grid.unwrap_or_else(|| LAMBDA_GRID.to_vec());
    let bins = args.bins.unwrap_or_else(Bins::sat_sizes).clip(data.classes());
    let choice = raps_lambda_search(
        &data,
        &split,
        &LambdaSearch {
            grid: &grid,
            k_reg: args.k_reg,
            delta: args.delta,
            bins: &bins,
            temperature,
            randomized: args.randomized,
        },
    )?;
    emit(&choice, args.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Predict(a) => run_predict(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Experiment(a) => run_experiment_cmd(a),
        Command::LambdaSearch(a) => run_lambda_search(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
