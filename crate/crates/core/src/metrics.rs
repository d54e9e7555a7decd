//! Coverage, set size and their stratified forms.
//!
//! With strata `I_1..I_s` of a validation batch (grouped by set size),
//! the size-stratified coverage violation is
//!
//! ```text
//! SSCV = sup_i | (1/|I_i|) Σ_{j ∈ I_i} 1{y_j ∈ C(x_j)} - (1-δ) |
//! ```
//!
//! taken over populated strata only, and the size-adaptivity trade-off is
//! `SAT = (1 - SSCV) / μ`, where `μ` is the mean size of the non-empty sets.

use std::fmt;
use std::str::FromStr;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, predict, PredictionSetBatch};
use crate::dataset::{LogitDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::scores::{
    raps_scores, raps_scores_randomized, softmax_rows, true_label_ranks, Method, RapsParams, Temperature,
};

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bin {
    pub lo: usize,
    pub hi: usize,
}

impl Bin {
    pub fn contains(&self, v: usize) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// `"2 to 3"`, or `"1"` for a single value.
    pub fn label(&self) -> String {
        if self.lo == self.hi {
            self.lo.to_string()
        } else {
            format!("{} to {}", self.lo, self.hi)
        }
    }
}

/// Sorted, disjoint inclusive intervals. Used for set sizes (0-indexed) and
/// for difficulty, which is the 1-indexed rank of the true label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Bins {
    ranges: Vec<Bin>,
}

pub type SizeBins = Bins;

impl Bins {
    pub fn new(ranges: Vec<Bin>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidConfig("bins must not be empty".into()));
        }
        for (i, bin) in ranges.iter().enumerate() {
            if bin.lo > bin.hi {
                return Err(Error::InvalidConfig(format!("bin {}-{} is reversed", bin.lo, bin.hi)));
            }
            if i > 0 && ranges[i - 1].hi >= bin.lo {
                return Err(Error::InvalidConfig(format!(
                    "bins {} and {} overlap or are out of order",
                    ranges[i - 1].label(),
                    bin.label()
                )));
            }
        }
        Ok(Self { ranges })
    }

    fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            ranges: pairs.iter().map(|&(lo, hi)| Bin { lo, hi }).collect(),
        }
    }

    /// `{0-1, 2-3, 4-6, 7-10, 11-100, 101-1000}`.
    pub fn standard_sizes() -> Self {
        Self::from_pairs(&[(0, 1), (2, 3), (4, 6), (7, 10), (11, 100), (101, 1000)])
    }

    /// `{0-1, 2-3, 4-10, 11-100, 101-1000}`, the coarser partition used with SAT.
    pub fn sat_sizes() -> Self {
        Self::from_pairs(&[(0, 1), (2, 3), (4, 10), (11, 100), (101, 1000)])
    }

    /// `{1, 2-3, 4-6, 7-10, 11-100, 101-1000}` over 1-indexed difficulty.
    pub fn standard_difficulty() -> Self {
        Self::from_pairs(&[(1, 1), (2, 3), (4, 6), (7, 10), (11, 100), (101, 1000)])
    }

    /// Drops intervals starting above `max` and caps the rest at `max`.
    pub fn clip(&self, max: usize) -> Self {
        let ranges: Vec<Bin> = self
            .ranges
            .iter()
            .filter(|b| b.lo <= max)
            .map(|b| Bin {
                lo: b.lo,
                hi: b.hi.min(max),
            })
            .collect();
        Self { ranges }
    }

    pub fn ranges(&self) -> &[Bin] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn locate(&self, v: usize) -> Option<usize> {
        self.ranges.iter().position(|b| b.contains(v))
    }

    /// Whether every integer in `lo..=hi` falls in some bin.
    pub fn covers(&self, lo: usize, hi: usize) -> bool {
        let mut next = lo;
        for b in &self.ranges {
            if b.lo > next {
                break;
            }
            next = next.max(b.hi.saturating_add(1));
            if next > hi {
                return true;
            }
        }
        next > hi
    }
}

impl fmt::Display for Bins {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .ranges
            .iter()
            .map(|b| if b.lo == b.hi { b.lo.to_string() } else { format!("{}-{}", b.lo, b.hi) })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Bins {
    type Err = Error;

    /// Parses `"0-1,2-3,4-6"`; a lone number is a single-value bin.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |part: &str| Error::InvalidConfig(format!("cannot parse bin {part:?} in {s:?}"));
        let ranges = s
            .split(',')
            .map(str::trim)
            .map(|part| {
                let (lo, hi) = part.split_once('-').unwrap_or((part, part));
                let lo = lo.trim().parse().map_err(|_| bad(part))?;
                let hi = hi.trim().parse().map_err(|_| bad(part))?;
                Ok(Bin { lo, hi })
            })
            .collect::<Result<Vec<_>>>()?;
        Bins::new(ranges)
    }
}

impl TryFrom<String> for Bins {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Bins> for String {
    fn from(b: Bins) -> String {
        b.to_string()
    }
}

/// One stratum; `coverage` and `mean_size` are `None` when it is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub bin: String,
    pub count: usize,
    pub covered: usize,
    pub coverage: Option<f64>,
    pub mean_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub strata: Vec<Stratum>,
}

impl StratifiedReport {
    pub fn total(&self) -> usize {
        self.strata.iter().map(|s| s.count).sum()
    }

    pub fn get(&self, bin: &str) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.bin == bin)
    }

    fn tally(bins: &Bins, batch: &PredictionSetBatch, keys: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut count = vec![0usize; bins.len()];
        let mut covered = vec![0usize; bins.len()];
        let mut size_sum = vec![0usize; bins.len()];
        for (i, slot) in keys {
            count[slot] += 1;
            covered[slot] += usize::from(batch.hits[i]);
            size_sum[slot] += batch.sizes[i];
        }
        let strata = bins
            .ranges()
            .iter()
            .enumerate()
            .map(|(j, bin)| {
                let populated = count[j] > 0;
                Stratum {
                    bin: bin.label(),
                    count: count[j],
                    covered: covered[j],
                    coverage: populated.then(|| covered[j] as f64 / count[j] as f64),
                    mean_size: populated.then(|| size_sum[j] as f64 / count[j] as f64),
                }
            })
            .collect();
        Self { strata }
    }
}

/// Fraction of examples whose set contains the true label.
pub fn marginal_coverage(batch: &PredictionSetBatch) -> f64 {
    let hits = batch.hits.iter().filter(|&&h| h).count();
    hits as f64 / batch.len() as f64
}

/// Mean set size; with `skip_empty`, empty sets are left out.
pub fn mean_set_size(batch: &PredictionSetBatch, skip_empty: bool) -> Result<f64> {
    let kept: Vec<usize> = batch.sizes.iter().copied().filter(|&s| !skip_empty || s > 0).collect();
    if kept.is_empty() {
        return Err(if skip_empty { Error::AllSetsEmpty } else { Error::EmptyHoldout });
    }
    Ok(kept.iter().sum::<usize>() as f64 / kept.len() as f64)
}

/// Coverage per set-size stratum.
pub fn size_stratified(batch: &PredictionSetBatch, bins: &Bins) -> Result<StratifiedReport> {
    let slots = batch
        .sizes
        .iter()
        .map(|&size| bins.locate(size).ok_or(Error::UncoveredSize { size }))
        .collect::<Result<Vec<_>>>()?;
    Ok(StratifiedReport::tally(bins, batch, slots.into_iter().enumerate()))
}

/// Coverage and size per difficulty stratum, where difficulty is the
/// 1-indexed rank of the true label.
pub fn difficulty_stratified(batch: &PredictionSetBatch, bins: &Bins) -> Result<StratifiedReport> {
    let slots = batch
        .difficulty
        .iter()
        .map(|&rank| {
            bins.locate(rank + 1)
                .ok_or_else(|| Error::InvalidConfig(format!("difficulty {} is outside every bin", rank + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StratifiedReport::tally(bins, batch, slots.into_iter().enumerate()))
}

/// Largest coverage deviation from `1-δ` over populated strata.
pub fn sscv_of(report: &StratifiedReport, delta: f64) -> Result<f64> {
    report
        .strata
        .iter()
        .filter_map(|s| s.coverage)
        .map(|c| (c - (1.0 - delta)).abs())
        .reduce(f64::max)
        .ok_or(Error::AllBinsEmpty)
}

pub fn sscv(batch: &PredictionSetBatch, bins: &Bins, delta: f64) -> Result<f64> {
    sscv_of(&size_stratified(batch, bins)?, delta)
}

/// `(1 - SSCV) / μ`.
pub fn sat_value(sscv: f64, mean_nonempty_size: f64) -> f64 {
    (1.0 - sscv) / mean_nonempty_size
}

pub fn sat(batch: &PredictionSetBatch, bins: &Bins, delta: f64) -> Result<f64> {
    let mu = mean_set_size(batch, true)?;
    Ok(sat_value(sscv(batch, bins, delta)?, mu))
}

/// Median, averaging the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Mean within each trial, then the median across trials.
pub fn median_of_means(trials: &[Vec<f64>]) -> Option<f64> {
    let means: Vec<f64> = trials
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| t.iter().sum::<f64>() / t.len() as f64)
        .collect();
    median(&means)
}

/// Grid from which the RAPS penalty is chosen by smallest SSCV.
pub const LAMBDA_GRID: [f64; 9] = [1e-5, 1e-4, 8e-4, 1e-3, 15e-4, 2e-3, 1e-2, 0.1, 1.0];

/// Settings for [`raps_lambda_search`].
#[derive(Debug, Clone)]
pub struct LambdaSearch<'a> {
    pub grid: &'a [f64],
    pub k_reg: usize,
    pub delta: f64,
    /// Size bins for SSCV, already clipped to the label count.
    pub bins: &'a Bins,
    pub temperature: Temperature,
    pub randomized: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEvaluation {
    pub lambda: f64,
    pub q_hat: f64,
    pub sscv: f64,
    pub coverage: f64,
    pub mean_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub evaluations: Vec<LambdaEvaluation>,
}

/// Calibrates RAPS on the calibration side for each `λ` in the grid, measures
/// SSCV on the validation side and keeps the smallest (ties to smaller `λ`).
pub fn raps_lambda_search(dataset: &LogitDataset, split: &SplitIndices, search: &LambdaSearch<'_>) -> Result<LambdaChoice> {
    if search.grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let probs = softmax_rows(dataset.logits(), search.temperature);
    let cal_labels: Vec<usize> = split.calibration.iter().map(|&i| dataset.labels()[i]).collect();
    let val_labels: Vec<usize> = split.validation.iter().map(|&i| dataset.labels()[i]).collect();
    let difficulty = true_label_ranks(dataset.logits().select(Axis(0), &split.validation).view(), &val_labels);
    let mut evaluations = Vec::with_capacity(search.grid.len());
    for &lambda in search.grid {
        let params = RapsParams::new(search.k_reg, lambda);
        params.validate(dataset.classes())?;
        let scores = match search.randomized {
            Some(seed) => raps_scores_randomized(probs.view(), &params, seed),
            None => raps_scores(probs.view(), &params),
        };
        let holdout = scores.select(&split.calibration).at_labels(&cal_labels);
        let cal = calibrate(&holdout, search.delta, Method::Raps, search.temperature)?;
        let batch = predict(&scores.select(&split.validation), &cal, &val_labels, difficulty.clone());
        evaluations.push(LambdaEvaluation {
            lambda,
            q_hat: cal.q_hat,
            sscv: sscv(&batch, search.bins, search.delta)?,
            coverage: marginal_coverage(&batch),
            mean_size: mean_set_size(&batch, false)?,
        });
    }
    let best = evaluations
        .iter()
        .min_by(|a, b| a.sscv.total_cmp(&b.sscv).then(a.lambda.total_cmp(&b.lambda)))
        .expect("grid is non-empty");
    Ok(LambdaChoice {
        lambda: best.lambda,
        evaluations: evaluations.clone(),
    })
}
