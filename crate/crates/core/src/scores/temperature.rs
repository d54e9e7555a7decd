use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive softmax temperature; logits are divided by it.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub const IDENTITY: Temperature = Temperature(1.0);

    /// Search bracket and tolerance used by [`fit_temperature`].
    pub const SEARCH_LOW: f64 = 0.05;
    pub const SEARCH_HIGH: f64 = 10.0;
    pub const SEARCH_TOL: f64 = 1e-4;

    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t > 0.0 {
            Ok(Temperature(t))
        } else {
            Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Mean negative log-likelihood of `softmax(z / T)` at the true labels.
pub fn mean_nll(logits: ArrayView2<'_, f64>, labels: &[usize], temperature: Temperature) -> f64 {
    let t = temperature.get();
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z / t));
            let lse = max + row.iter().map(|&z| (z / t - max).exp()).sum::<f64>().ln();
            lse - row[y] / t
        })
        .sum();
    total / labels.len() as f64
}

/// Fits the temperature minimizing calibration NLL by golden-section search
/// on `[0.05, 10]`. Falls back to `T = 1` if the search ends worse than it.
pub fn fit_temperature(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Temperature> {
    if labels.is_empty() || logits.nrows() != labels.len() {
        return Err(Error::DegenerateInput(format!(
            "{} logit rows and {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::DegenerateInput(
            "calibration labels contain a single class".into(),
        ));
    }
    let nll = |t: f64| mean_nll(logits, labels, Temperature(t));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (Temperature::SEARCH_LOW, Temperature::SEARCH_HIGH);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = nll(x1);
    let mut f2 = nll(x2);
    while hi - lo > Temperature::SEARCH_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = nll(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = nll(x2);
        }
    }
    let best = 0.5 * (lo + hi);
    if nll(best) <= nll(1.0) {
        Ok(Temperature(best))
    } else {
        Ok(Temperature::IDENTITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::synth::{synth, SynthConfig};
    use ndarray::array;

    #[test]
    fn rejects_non_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert_eq!(Temperature::new(2.0).unwrap().get(), 2.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        let z = array![[1.0, 0.0], [2.0, 0.5]];
        assert!(matches!(fit_temperature(z.view(), &[0, 0]), Err(Error::DegenerateInput(_))));
    }

    fn calibrated(scale: f64) -> crate::dataset::LogitDataset {
        // labels drawn from softmax(logits), then logits rescaled
        let cfg = SynthConfig {
            classes: 10,
            separation: 2.0,
            examples: 20_000,
            seed: 11,
            sharpness: 1.0 / scale,
        };
        synth(&cfg).unwrap()
    }

    #[test]
    fn calibrated_logits_give_unit_temperature() {
        let ds = calibrated(1.0);
        let t = fit_temperature(ds.logits(), ds.labels()).unwrap();
        assert!((t.get() - 1.0).abs() < 0.1, "T = {}", t.get());
    }

    #[test]
    fn tripled_logits_give_temperature_three() {
        let ds = calibrated(3.0);
        let t = fit_temperature(ds.logits(), ds.labels()).unwrap();
        assert!((t.get() - 3.0).abs() < 0.3, "T = {}", t.get());
    }

    #[test]
    fn fitted_nll_never_worse_than_identity() {
        for seed in 0..5 {
            let ds = synth(&SynthConfig {
                classes: 5,
                separation: 1.0 + seed as f64,
                examples: 300,
                seed,
                sharpness: 0.5 + 0.4 * seed as f64,
            })
            .unwrap();
            let t = fit_temperature(ds.logits(), ds.labels()).unwrap();
            assert!(mean_nll(ds.logits(), ds.labels(), t) <= mean_nll(ds.logits(), ds.labels(), Temperature::IDENTITY));
        }
    }
}
