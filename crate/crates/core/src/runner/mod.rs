//! End-to-end experiments over repeated random calibration/validation splits.
//!
//! Every trial draws a fresh split, refits the temperature on its
//! calibration side, scores the full logit matrix once per method and then,
//! for each `δ`, calibrates, builds validation sets and measures them.
//! Trials run on a bounded rayon pool and are collected in trial order, so
//! the reports do not depend on the number of workers.

pub mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, coverage_distribution, predict, BetaParams, PredictionSetBatch};
use crate::dataset::{load_logits, save_json, save_report, DataFormat, LogitDataset, ReportFormat, SplitSpec};
use crate::error::{Error, Result};
use crate::evidential::EvidentialConfig;
use crate::metrics::{
    difficulty_stratified, marginal_coverage, mean_set_size, median, raps_lambda_search, size_stratified, sscv_of,
    sat_value, Bins, LambdaSearch, StratifiedReport,
};
use crate::scores::{fit_temperature, true_label_ranks, Method, RapsParams, ScoreConfig};

fn default_methods() -> Vec<Method> {
    vec![Method::Ecp, Method::Aps, Method::Raps]
}

fn default_deltas() -> Vec<f64> {
    vec![0.1]
}

fn default_trials() -> usize {
    10
}

fn default_fraction() -> f64 {
    0.3
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

/// Full description of one experiment; every field but the data paths has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub logits: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_fraction")]
    pub calibration_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub evidential: EvidentialConfig,
    #[serde(default)]
    pub raps: RapsParams,
    /// When set, RAPS's `λ` is chosen per trial and `δ` from this grid by
    /// smallest validation SSCV, replacing `raps.lambda`.
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    /// Seed for randomized APS/RAPS; each trial offsets it by its index.
    #[serde(default)]
    pub randomized: Option<u64>,
    /// Set-size strata for the stratified coverage report.
    #[serde(default = "Bins::standard_sizes")]
    pub size_bins: Bins,
    /// Set-size strata for SSCV and SAT.
    #[serde(default = "Bins::sat_sizes")]
    pub sat_bins: Bins,
    /// 1-indexed difficulty strata.
    #[serde(default = "Bins::standard_difficulty")]
    pub difficulty_bins: Bins,
    /// Worker threads; 0 uses rayon's default.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn new(logits: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Self {
            logits: logits.into(),
            labels: labels.into(),
            methods: default_methods(),
            deltas: default_deltas(),
            trials: default_trials(),
            calibration_fraction: default_fraction(),
            seed: 0,
            out: default_out(),
            evidential: EvidentialConfig::default(),
            raps: RapsParams::default(),
            lambda_grid: None,
            randomized: None,
            size_bins: Bins::standard_sizes(),
            sat_bins: Bins::sat_sizes(),
            difficulty_bins: Bins::standard_difficulty(),
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods selected".into()));
        }
        if self.deltas.is_empty() {
            return Err(Error::InvalidConfig("no delta values given".into()));
        }
        if let Some(d) = self.deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {d}")));
        }
        let f = self.calibration_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!("calibration fraction must lie in (0, 1), got {f}")));
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(Error::InvalidConfig("lambda grid must be non-empty and non-negative".into()));
            }
        }
        Ok(())
    }

    fn score_config(&self, method: Method, trial: usize) -> ScoreConfig {
        ScoreConfig {
            method,
            evidential: self.evidential.clone(),
            raps: self.raps,
            randomized: self.randomized.map(|s| s.wrapping_add(trial as u64)),
        }
    }
}

/// Metrics of one (method, δ, trial) on the validation side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    pub delta: f64,
    pub trial: usize,
    pub temperature: f64,
    /// RAPS penalty actually used.
    pub lambda: Option<f64>,
    /// Empty when the threshold is unbounded.
    pub q_hat: Option<f64>,
    pub coverage: f64,
    pub mean_size: f64,
    /// Mean over non-empty sets; empty when every set is empty.
    pub mean_size_nonempty: Option<f64>,
    pub empty_fraction: f64,
    pub sscv: f64,
    pub sat: Option<f64>,
    pub accuracy: f64,
}

/// Medians across trials of the per-trial means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub method: Method,
    pub delta: f64,
    pub trials: usize,
    pub coverage: f64,
    pub mean_size: f64,
    pub mean_size_nonempty: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatRecord {
    pub method: Method,
    pub delta: f64,
    pub mean_size_nonempty: Option<f64>,
    pub sscv: f64,
    pub sat: Option<f64>,
}

/// One stratum pooled over all trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRecord {
    pub method: Method,
    pub delta: f64,
    pub bin: String,
    pub count: usize,
    pub covered: usize,
    pub coverage: Option<f64>,
    pub mean_size: Option<f64>,
}

/// Threshold and coverage reliability of one calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRecord {
    pub method: Method,
    pub delta: f64,
    pub trial: usize,
    pub n: usize,
    pub q_hat: Option<f64>,
    pub gamma: Option<f64>,
    pub u_c: Option<f64>,
    /// Coverage law `Beta(a, b)`; absent for Base or when `⌊(n+1)δ⌋ = 0`.
    pub beta: Option<BetaParams>,
    pub temperature: f64,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub notes: Vec<String>,
    pub records: Vec<ReliabilityRecord>,
}

/// Everything an experiment produces, before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub summary: Vec<SummaryRecord>,
    pub per_trial: Vec<TrialRecord>,
    pub size_strata: Vec<StratumRecord>,
    pub difficulty_strata: Vec<StratumRecord>,
    pub sat: Vec<SatRecord>,
    pub reliability: ReliabilityReport,
}

impl ExperimentReport {
    pub const FILES: [&'static str; 6] = [
        "summary.csv",
        "per_trial.csv",
        "size_strat.csv",
        "difficulty_strat.csv",
        "sat.csv",
        "reliability.json",
    ];

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_report(&self.summary, dir.join("summary.csv"), ReportFormat::Csv)?;
        save_report(&self.per_trial, dir.join("per_trial.csv"), ReportFormat::Csv)?;
        save_report(&self.size_strata, dir.join("size_strat.csv"), ReportFormat::Csv)?;
        save_report(&self.difficulty_strata, dir.join("difficulty_strat.csv"), ReportFormat::Csv)?;
        save_report(&self.sat, dir.join("sat.csv"), ReportFormat::Csv)?;
        save_json(&self.reliability, dir.join("reliability.json"))
    }
}

/// Everything measured for one (method, δ) inside a trial.
struct Cell {
    record: TrialRecord,
    reliability: ReliabilityRecord,
    sizes: StratifiedReport,
    difficulty: StratifiedReport,
}

/// Bins clipped to the label count, checked to cover every reachable value.
struct ClippedBins {
    size: Bins,
    sat: Bins,
    difficulty: Bins,
}

impl ClippedBins {
    fn new(config: &ExperimentConfig, classes: usize) -> Result<Self> {
        let clipped = Self {
            size: config.size_bins.clip(classes),
            sat: config.sat_bins.clip(classes),
            difficulty: config.difficulty_bins.clip(classes),
        };
        for (name, bins, lo) in [("size", &clipped.size, 0), ("sat", &clipped.sat, 0), ("difficulty", &clipped.difficulty, 1)] {
            if !bins.covers(lo, classes) {
                return Err(Error::InvalidConfig(format!(
                    "{name} bins {} do not cover {lo}..={classes}",
                    config_bins(config, name)
                )));
            }
        }
        Ok(clipped)
    }
}

fn config_bins<'a>(config: &'a ExperimentConfig, name: &str) -> &'a Bins {
    match name {
        "size" => &config.size_bins,
        "sat" => &config.sat_bins,
        _ => &config.difficulty_bins,
    }
}

fn run_trial(dataset: &LogitDataset, config: &ExperimentConfig, bins: &ClippedBins, trial: usize) -> Result<Vec<Cell>> {
    let context = |method: &str, delta: f64| {
        let method = method.to_string();
        move |e: Error| Error::Trial {
            method: method.clone(),
            delta,
            trial,
            source: Box::new(e),
        }
    };
    let split = SplitSpec::new(config.calibration_fraction, config.seed, trial as u64)
        .split(dataset.len())
        .map_err(context("split", f64::NAN))?;
    let calibration = dataset.select(&split.calibration);
    let validation = dataset.select(&split.validation);
    let temperature =
        fit_temperature(calibration.logits(), calibration.labels()).map_err(context("temperature", f64::NAN))?;
    let difficulty = true_label_ranks(validation.logits(), validation.labels());
    let accuracy = validation.top1_accuracy();

    let mut cells = Vec::new();
    for &method in &config.methods {
        let base = config.score_config(method, trial);
        let fixed = match (method, &config.lambda_grid) {
            (Method::Raps, Some(_)) => None,
            _ => Some(base.score(dataset.logits(), temperature).map_err(context(method.name(), f64::NAN))?),
        };
        for &delta in &config.deltas {
            let wrap = context(method.name(), delta);
            let (scores, lambda) = match (&fixed, &config.lambda_grid) {
                (Some(s), _) => (s.clone(), (method == Method::Raps).then_some(config.raps.lambda)),
                (None, Some(grid)) => {
                    let choice = raps_lambda_search(
                        dataset,
                        &split,
                        &LambdaSearch {
                            grid,
                            k_reg: config.raps.k_reg,
                            delta,
                            bins: &bins.sat,
                            temperature,
                            randomized: base.randomized,
                        },
                    )
                    .map_err(&wrap)?;
                    let tuned = ScoreConfig {
                        raps: RapsParams::new(config.raps.k_reg, choice.lambda),
                        ..base.clone()
                    };
                    (tuned.score(dataset.logits(), temperature).map_err(&wrap)?, Some(choice.lambda))
                }
                (None, None) => unreachable!(),
            };
            let holdout = scores.select(&split.calibration).at_labels(calibration.labels());
            let cal = calibrate(&holdout, delta, method, temperature).map_err(&wrap)?;
            let batch = predict(&scores.select(&split.validation), &cal, validation.labels(), difficulty.clone());
            cells.push(measure(&batch, &cal, bins, trial, lambda, accuracy).map_err(&wrap)?);
        }
    }
    Ok(cells)
}

fn measure(
    batch: &PredictionSetBatch,
    cal: &crate::conformal::CalibrationResult,
    bins: &ClippedBins,
    trial: usize,
    lambda: Option<f64>,
    accuracy: f64,
) -> Result<Cell> {
    let nonempty = match mean_set_size(batch, true) {
        Ok(mu) => Some(mu),
        Err(Error::AllSetsEmpty) => None,
        Err(e) => return Err(e),
    };
    let sscv = sscv_of(&size_stratified(batch, &bins.sat)?, cal.delta)?;
    let empty = batch.sizes.iter().filter(|&&s| s == 0).count();
    let q_hat = cal.q_hat.is_finite().then_some(cal.q_hat);
    let beta = match (cal.reliability, coverage_distribution(cal.n, cal.delta)) {
        (Some(_), Ok(b)) => Some(b),
        _ => None,
    };
    Ok(Cell {
        record: TrialRecord {
            method: cal.method,
            delta: cal.delta,
            trial,
            temperature: cal.temperature.get(),
            lambda,
            q_hat,
            coverage: marginal_coverage(batch),
            mean_size: mean_set_size(batch, false)?,
            mean_size_nonempty: nonempty,
            empty_fraction: empty as f64 / batch.len() as f64,
            sscv,
            sat: nonempty.map(|mu| sat_value(sscv, mu)),
            accuracy,
        },
        reliability: ReliabilityRecord {
            method: cal.method,
            delta: cal.delta,
            trial,
            n: cal.n,
            q_hat,
            gamma: cal.gamma(),
            u_c: cal.u_c(),
            beta,
            temperature: cal.temperature.get(),
            lambda,
        },
        sizes: size_stratified(batch, &bins.size)?,
        difficulty: difficulty_stratified(batch, &bins.difficulty)?,
    })
}

fn pool(cells: &[&Cell], pick: impl Fn(&Cell) -> &StratifiedReport) -> Vec<StratumRecord> {
    let first = &cells[0].record;
    let template = pick(cells[0]);
    template
        .strata
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let count: usize = cells.iter().map(|c| pick(c).strata[j].count).sum();
            let covered: usize = cells.iter().map(|c| pick(c).strata[j].covered).sum();
            let size_sum: f64 = cells
                .iter()
                .map(|c| {
                    let st = &pick(c).strata[j];
                    st.mean_size.map_or(0.0, |m| m * st.count as f64)
                })
                .sum();
            StratumRecord {
                method: first.method,
                delta: first.delta,
                bin: s.bin.clone(),
                count,
                covered,
                coverage: (count > 0).then(|| covered as f64 / count as f64),
                mean_size: (count > 0).then(|| size_sum / count as f64),
            }
        })
        .collect()
}

fn med(values: impl Iterator<Item = f64>) -> f64 {
    median(&values.collect::<Vec<_>>()).expect("at least one trial")
}

fn med_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    median(&values.flatten().collect::<Vec<_>>())
}

/// Runs the experiment on an in-memory dataset without touching the disk.
pub fn run_on(dataset: &LogitDataset, config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    for &method in &config.methods {
        config.score_config(method, 0).validate(dataset.classes())?;
    }
    let bins = ClippedBins::new(config, dataset.classes())?;
    let pool_builder = rayon::ThreadPoolBuilder::new().num_threads(config.workers);
    let workers = pool_builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let trials: Vec<Vec<Cell>> = workers.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|t| run_trial(dataset, config, &bins, t))
            .collect::<Result<_>>()
    })?;

    let groups = config.methods.len() * config.deltas.len();
    let mut report = ExperimentReport {
        summary: Vec::new(),
        per_trial: Vec::new(),
        size_strata: Vec::new(),
        difficulty_strata: Vec::new(),
        sat: Vec::new(),
        reliability: ReliabilityReport {
            notes: vec![
                "temperature is refit on each trial's calibration split".into(),
                "RAPS lambda search calibrates on the trial's calibration split and picks the smallest SSCV on its validation split".into(),
            ],
            records: Vec::new(),
        },
    };
    for g in 0..groups {
        let cells: Vec<&Cell> = trials.iter().map(|t| &t[g]).collect();
        let first = &cells[0].record;
        report.summary.push(SummaryRecord {
            method: first.method,
            delta: first.delta,
            trials: cells.len(),
            coverage: med(cells.iter().map(|c| c.record.coverage)),
            mean_size: med(cells.iter().map(|c| c.record.mean_size)),
            mean_size_nonempty: med_opt(cells.iter().map(|c| c.record.mean_size_nonempty)),
            accuracy: med(cells.iter().map(|c| c.record.accuracy)),
        });
        report.sat.push(SatRecord {
            method: first.method,
            delta: first.delta,
            mean_size_nonempty: med_opt(cells.iter().map(|c| c.record.mean_size_nonempty)),
            sscv: med(cells.iter().map(|c| c.record.sscv)),
            sat: med_opt(cells.iter().map(|c| c.record.sat)),
        });
        report.size_strata.extend(pool(&cells, |c| &c.sizes));
        report.difficulty_strata.extend(pool(&cells, |c| &c.difficulty));
    }
    for cells in &trials {
        for cell in cells {
            report.per_trial.push(cell.record.clone());
            report.reliability.records.push(cell.reliability.clone());
        }
    }
    Ok(report)
}

/// Loads the configured data, runs every trial and writes the report files
/// into `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dataset = load_logits(&config.logits, &config.labels, None::<DataFormat>)?;
    let report = run_on(&dataset, config)?;
    report.write(&config.out)?;
    Ok(report)
}
