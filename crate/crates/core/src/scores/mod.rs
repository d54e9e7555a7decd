//! Non-conformity scores for every method, plus temperature scaling.
//!
//! Lower scores mean a better fit between an example and a candidate label.
//! All methods share one ranking convention: labels are ordered by
//! descending probability and ties go to the lower label index.
//!
//! | method | score of label `k` |
//! |--------|--------------------|
//! | ECP    | `C_k / max_ν C_ν` (evidential classification cost, row-normalized) |
//! | Base   | cumulative softmax mass up to and including `k` (thresholded at `1-δ`) |
//! | APS    | cumulative softmax mass up to and including `k` |
//! | RAPS   | APS score plus `λ·max(0, rank+1-k_reg)` |
//! | LAS    | `1 - p_k` |
//!
//! ECP's cost, for rank `r_k` and softmax utility `φ`:
//!
//! ```text
//! C_k = K·u · (-π_k ln p_k) / (φ_k · p_k² · (K - r_k))
//! ```

mod temperature;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use temperature::{fit_temperature, mean_nll, Temperature};

use crate::error::{Error, Result};
use crate::evidential::{descending_order, profile_with_temperature, EvidentialConfig, EvidentialProfile};

/// Scoring method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ecp,
    Base,
    Aps,
    Raps,
    Las,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ecp, Method::Base, Method::Aps, Method::Raps, Method::Las];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ecp => "ecp",
            Method::Base => "base",
            Method::Aps => "aps",
            Method::Raps => "raps",
            Method::Las => "las",
        }
    }

    /// Whether prediction sets come from a calibrated conformal quantile.
    /// Base thresholds cumulative probability directly.
    pub fn is_conformal(self) -> bool {
        self != Method::Base
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// RAPS regularization. `lambda = 0` reduces RAPS to APS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RapsParams {
    pub k_reg: usize,
    pub lambda: f64,
}

impl Default for RapsParams {
    fn default() -> Self {
        Self { k_reg: 5, lambda: 0.1 }
    }
}

impl RapsParams {
    pub fn new(k_reg: usize, lambda: f64) -> Self {
        Self { k_reg, lambda }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.k_reg > classes {
            return Err(Error::InvalidConfig(format!(
                "k_reg = {} exceeds label count {classes}",
                self.k_reg
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda = {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// Penalty for a 0-indexed rank; the top `k_reg` labels are free.
    pub fn penalty(&self, rank: usize) -> f64 {
        self.lambda * (rank + 1).saturating_sub(self.k_reg) as f64
    }
}

/// Per-example, per-label scores from one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub method: Method,
    pub scores: Array2<f64>,
    /// Descending-probability rank of each label under the method's probabilities.
    pub ranks: Array2<usize>,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn classes(&self) -> usize {
        self.scores.ncols()
    }

    /// Score of each row's given label.
    pub fn at_labels(&self, labels: &[usize]) -> Vec<f64> {
        labels.iter().enumerate().map(|(i, &y)| self.scores[[i, y]]).collect()
    }

    pub fn select(&self, indices: &[usize]) -> ScoreMatrix {
        ScoreMatrix {
            method: self.method,
            scores: self.scores.select(Axis(0), indices),
            ranks: self.ranks.select(Axis(0), indices),
        }
    }
}

/// Everything needed to score a logit matrix with one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub method: Method,
    #[serde(default)]
    pub evidential: EvidentialConfig,
    #[serde(default)]
    pub raps: RapsParams,
    /// Seed for the randomized APS/RAPS variant; `None` is deterministic.
    #[serde(default)]
    pub randomized: Option<u64>,
}

impl ScoreConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            evidential: EvidentialConfig::default(),
            raps: RapsParams::default(),
            randomized: None,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.method {
            Method::Ecp => self.evidential.validate(classes),
            Method::Raps => self.raps.validate(classes),
            _ => Ok(()),
        }
    }

    /// Scores every row. `temperature` scales the softmax for the baselines
    /// and ECP's utility; ECP evidence always uses the raw logits.
    pub fn score(&self, logits: ArrayView2<'_, f64>, temperature: Temperature) -> Result<ScoreMatrix> {
        self.validate(logits.ncols())?;
        if self.method == Method::Ecp {
            return ecp_scores(logits, &self.evidential, temperature);
        }
        let probs = softmax_rows(logits, temperature);
        Ok(match (self.method, self.randomized) {
            (Method::Base, _) => base_scores(probs.view()),
            (Method::Aps, None) => aps_scores(probs.view()),
            (Method::Aps, Some(seed)) => aps_scores_randomized(probs.view(), seed),
            (Method::Raps, None) => raps_scores(probs.view(), &self.raps),
            (Method::Raps, Some(seed)) => raps_scores_randomized(probs.view(), &self.raps, seed),
            (Method::Las, _) => las_scores(probs.view()),
            (Method::Ecp, _) => unreachable!(),
        })
    }
}

/// 0-indexed rank of each row's label in descending logit order, ties to
/// the lower index. Temperature never changes this order, so it serves as
/// the method-independent difficulty of an example.
pub fn true_label_ranks(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let z = row[y];
            row.iter()
                .enumerate()
                .filter(|&(k, &v)| v > z || (v == z && k < y))
                .count()
        })
        .collect()
}

/// Numerically stable `softmax(z / T)`.
pub fn softmax(z: &[f64], temperature: Temperature) -> Vec<f64> {
    let t = temperature.get();
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let exps: Vec<f64> = z.iter().map(|&v| (v / t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>, temperature: Temperature) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        let row = softmax(&src.to_vec(), temperature);
        dst.iter_mut().zip(row).for_each(|(d, v)| *d = v);
    }
    out
}

/// Rank scaling `K / (K - r)`.
pub fn rho(classes: usize, rank: usize) -> Result<f64> {
    if rank >= classes {
        return Err(Error::RankOutOfRange { rank, classes });
    }
    Ok(classes as f64 / (classes - rank) as f64)
}

/// Label evidential cost `Ĉ_k` for every label. Both `p` and `φ` are
/// clamped to `[epsilon, 1]`.
pub fn label_evidential_cost(profile: &EvidentialProfile, config: &EvidentialConfig) -> Vec<f64> {
    let classes = profile.classes();
    (0..classes)
        .map(|k| {
            let p = config.clamp(profile.p[k]);
            let phi = config.clamp(profile.utility[k]);
            let pi = config.base_rate(k, classes);
            -(pi * p.ln()) / (phi * p * p * (classes - profile.ranks[k]) as f64)
        })
        .collect()
}

/// Evidential classification cost `C_k = K·u·Ĉ_k` for every label.
pub fn ecc(profile: &EvidentialProfile, config: &EvidentialConfig) -> Vec<f64> {
    let scale = profile.classes() as f64 * profile.u;
    label_evidential_cost(profile, config)
        .into_iter()
        .map(|c| scale * c)
        .collect()
}

/// Divides by the row maximum, so the largest entry is exactly 1.
fn normalize_by_max(costs: &mut [f64]) {
    let max = costs.iter().fold(f64::NEG_INFINITY, |m, &c| m.max(c));
    debug_assert!(max > 0.0 && max.is_finite());
    costs.iter_mut().for_each(|c| *c /= max);
}

/// ECP scores `S(k) = C_k / max_ν C_ν` for every row.
pub fn ecp_scores(
    logits: ArrayView2<'_, f64>,
    config: &EvidentialConfig,
    temperature: Temperature,
) -> Result<ScoreMatrix> {
    config.validate(logits.ncols())?;
    let mut scores = Array2::zeros(logits.dim());
    let mut ranks = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let profile = profile_with_temperature(&row.to_vec(), config, temperature)?;
        let mut costs = ecc(&profile, config);
        normalize_by_max(&mut costs);
        for k in 0..costs.len() {
            scores[[i, k]] = costs[k];
            ranks[[i, k]] = profile.ranks[k];
        }
    }
    Ok(ScoreMatrix {
        method: Method::Ecp,
        scores,
        ranks,
    })
}

/// Cumulative descending mass. `own_fraction` is drawn once per row and sets
/// how much of the label's own probability is included (1 is deterministic).
fn cumulative_scores(
    probs: ArrayView2<'_, f64>,
    method: Method,
    mut own_fraction: impl FnMut() -> f64,
    penalty: impl Fn(usize) -> f64,
) -> ScoreMatrix {
    let mut scores = Array2::zeros(probs.dim());
    let mut ranks = Array2::zeros(probs.dim());
    for (i, row) in probs.rows().into_iter().enumerate() {
        let row = row.to_vec();
        let order = descending_order(&row);
        let fraction = own_fraction();
        let mut before = 0.0;
        for (rank, &k) in order.iter().enumerate() {
            scores[[i, k]] = (before + fraction * row[k]) + penalty(rank);
            ranks[[i, k]] = rank;
            before += row[k];
        }
    }
    ScoreMatrix { method, scores, ranks }
}

/// Cumulative probability in rank order; Base sets threshold these at `1-δ`.
pub fn base_scores(probs: ArrayView2<'_, f64>) -> ScoreMatrix {
    cumulative_scores(probs, Method::Base, || 1.0, |_| 0.0)
}

/// Deterministic APS: the label's own probability is fully included.
pub fn aps_scores(probs: ArrayView2<'_, f64>) -> ScoreMatrix {
    cumulative_scores(probs, Method::Aps, || 1.0, |_| 0.0)
}

/// Randomized APS: one uniform draw per row scales the label's own mass.
pub fn aps_scores_randomized(probs: ArrayView2<'_, f64>, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cumulative_scores(probs, Method::Aps, || rng.random::<f64>(), |_| 0.0)
}

pub fn raps_scores(probs: ArrayView2<'_, f64>, params: &RapsParams) -> ScoreMatrix {
    cumulative_scores(probs, Method::Raps, || 1.0, |r| params.penalty(r))
}

pub fn raps_scores_randomized(probs: ArrayView2<'_, f64>, params: &RapsParams, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cumulative_scores(probs, Method::Raps, || rng.random::<f64>(), |r| params.penalty(r))
}

/// `1 - p_k`.
pub fn las_scores(probs: ArrayView2<'_, f64>) -> ScoreMatrix {
    let mut ranks = Array2::zeros(probs.dim());
    for (i, row) in probs.rows().into_iter().enumerate() {
        for (rank, k) in descending_order(&row.to_vec()).into_iter().enumerate() {
            ranks[[i, k]] = rank;
        }
    }
    ScoreMatrix {
        method: Method::Las,
        scores: probs.mapv(|p| 1.0 - p),
        ranks,
    }
}
