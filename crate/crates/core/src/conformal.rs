//! Split-conformal calibration, prediction sets and coverage reliability.
//!
//! Given `n` holdout scores at the true labels, the threshold `q̂` is the
//! `⌈(n+1)(1-δ)⌉`-th smallest score, which yields marginal coverage of at
//! least `1-δ` for exchangeable data. Labels with `score ≤ q̂` enter the set.
//!
//! Conditional on one holdout set, coverage follows
//! `Beta(n+1-l, l)` with `l = ⌊(n+1)δ⌋`. Reading those Beta parameters as
//! a two-outcome Dirichlet gives a confidence and an uncertainty for the
//! coverage itself:
//!
//! ```text
//! γ = (n - l) / (n + 1)        U_C = 2 / (n + 1)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{Method, ScoreMatrix, Temperature};

/// Slack for the Base rule's cumulative-mass comparison, absorbing
/// summation round-off (0.7 + 0.2 < 0.9 in binary floating point).
pub const CUMULATIVE_TOLERANCE: f64 = 1e-12;

fn validate_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `⌊(n+1)δ⌋`, treating products within 1e-9 of an integer as that integer.
pub fn miscoverage_count(n: usize, delta: f64) -> usize {
    let x = (n + 1) as f64 * delta;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// 1-indexed order statistic `⌈(n+1)(1-δ)⌉ = n + 1 - ⌊(n+1)δ⌋`.
pub fn conformal_rank(n: usize, delta: f64) -> usize {
    n + 1 - miscoverage_count(n, delta)
}

/// Confidence and uncertainty of the expected coverage for a fixed holdout set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub gamma: f64,
    pub u_c: f64,
}

impl Reliability {
    pub fn new(n: usize, delta: f64) -> Self {
        let l = miscoverage_count(n, delta);
        let total = (n + 1) as f64;
        Self {
            gamma: n.saturating_sub(l) as f64 / total,
            u_c: 2.0 / total,
        }
    }
}

/// Parameters `(a, b)` of the coverage distribution `Beta(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn variance(&self) -> f64 {
        let s = self.a + self.b;
        self.a * self.b / (s * s * (s + 1.0))
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// `Beta(n+1-l, l)` with `l = ⌊(n+1)δ⌋`; undefined when `l = 0`.
pub fn coverage_distribution(n: usize, delta: f64) -> Result<BetaParams> {
    validate_delta(delta)?;
    if n == 0 {
        return Err(Error::EmptyHoldout);
    }
    let l = miscoverage_count(n, delta);
    if l == 0 {
        return Err(Error::DegenerateBeta { n, delta });
    }
    Ok(BetaParams {
        a: (n + 1 - l) as f64,
        b: l as f64,
    })
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Outcome of calibrating one method on one holdout set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Conformal threshold; `+∞` (serialized as `null`) when the conformal
    /// rank exceeds `n`. For Base this is the cumulative mass `1-δ`.
    #[serde(with = "unbounded")]
    pub q_hat: f64,
    pub n: usize,
    pub delta: f64,
    pub method: Method,
    pub temperature: Temperature,
    /// Absent for Base, which is not conformally calibrated.
    pub reliability: Option<Reliability>,
}

impl CalibrationResult {
    pub fn gamma(&self) -> Option<f64> {
        self.reliability.map(|r| r.gamma)
    }

    pub fn u_c(&self) -> Option<f64> {
        self.reliability.map(|r| r.u_c)
    }
}

/// Calibrates a conformal threshold from holdout scores at the true labels.
pub fn calibrate(
    holdout_scores: &[f64],
    delta: f64,
    method: Method,
    temperature: Temperature,
) -> Result<CalibrationResult> {
    validate_delta(delta)?;
    let n = holdout_scores.len();
    if n == 0 {
        return Err(Error::EmptyHoldout);
    }
    if method == Method::Base {
        return Ok(base_threshold(n, delta, temperature));
    }
    let rank = conformal_rank(n, delta);
    let q_hat = if rank > n {
        f64::INFINITY
    } else {
        let mut sorted = holdout_scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[rank - 1]
    };
    Ok(CalibrationResult {
        q_hat,
        n,
        delta,
        method,
        temperature,
        reliability: Some(Reliability::new(n, delta)),
    })
}

/// Base sets skip calibration and keep labels until cumulative probability
/// reaches `1-δ`.
pub fn base_threshold(n: usize, delta: f64, temperature: Temperature) -> CalibrationResult {
    CalibrationResult {
        q_hat: 1.0 - delta,
        n,
        delta,
        method: Method::Base,
        temperature,
        reliability: None,
    }
}

/// Sorted label sets `{k : score ≤ q̂}`; for Base, the shortest top-ranked
/// prefix whose cumulative probability reaches `q̂`.
pub fn build_sets(scores: &ScoreMatrix, q_hat: f64) -> Vec<Vec<usize>> {
    let classes = scores.classes();
    scores
        .scores
        .rows()
        .into_iter()
        .zip(scores.ranks.rows())
        .map(|(row, ranks)| {
            if scores.method == Method::Base {
                let cutoff = (0..classes)
                    .filter(|&k| row[k] >= q_hat - CUMULATIVE_TOLERANCE)
                    .map(|k| ranks[k])
                    .min()
                    .unwrap_or(classes - 1);
                (0..classes).filter(|&k| ranks[k] <= cutoff).collect()
            } else {
                (0..classes).filter(|&k| row[k] <= q_hat).collect()
            }
        })
        .collect()
}

/// Prediction sets plus the per-example quantities every metric reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSetBatch {
    pub sets: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    pub hits: Vec<bool>,
    /// 0-indexed rank of the true label.
    pub difficulty: Vec<usize>,
}

impl PredictionSetBatch {
    /// `sets` must be sorted; `difficulty` holds each true label's 0-indexed
    /// rank, as from [`true_label_ranks`](crate::scores::true_label_ranks).
    pub fn new(sets: Vec<Vec<usize>>, labels: &[usize], difficulty: Vec<usize>) -> Self {
        assert_eq!(sets.len(), labels.len(), "one set per labelled example");
        assert_eq!(difficulty.len(), labels.len(), "one difficulty per labelled example");
        let sizes = sets.iter().map(Vec::len).collect();
        let hits = sets.iter().zip(labels).map(|(s, y)| s.binary_search(y).is_ok()).collect();
        Self {
            sets,
            sizes,
            hits,
            difficulty,
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Builds sets for `scores` under `calibration` and attaches labels.
pub fn predict(
    scores: &ScoreMatrix,
    calibration: &CalibrationResult,
    labels: &[usize],
    difficulty: Vec<usize>,
) -> PredictionSetBatch {
    debug_assert_eq!(scores.method, calibration.method);
    PredictionSetBatch::new(build_sets(scores, calibration.q_hat), labels, difficulty)
}
