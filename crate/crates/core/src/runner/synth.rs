//! Synthetic logits from overlapping Gaussian classes.
//!
//! A latent class `c` is drawn uniformly, the raw feature is
//! `x = σ·e_c + ε` with `ε ~ N(0, I)` and `σ` the separation, and the emitted
//! logits are `z = σ·x / s`. The label is then drawn from `softmax(s·z)`,
//! which equals the exact posterior of `c` given `x`, so the logits are
//! calibrated at temperature `1/s`.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::LogitDataset;
use crate::error::{Error, Result};
use crate::scores::{softmax, Temperature};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Distance of each class mean from the origin along its own axis.
    pub separation: f64,
    pub examples: usize,
    pub seed: u64,
    /// Labels follow `softmax(sharpness·z)`; 1 gives calibrated logits.
    #[serde(default = "unit")]
    pub sharpness: f64,
}

fn unit() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn new(classes: usize, separation: f64, examples: usize, seed: u64) -> Self {
        Self {
            classes,
            separation,
            examples,
            seed,
            sharpness: 1.0,
        }
    }
}

pub fn synth(config: &SynthConfig) -> Result<LogitDataset> {
    let &SynthConfig {
        classes,
        separation,
        examples,
        seed,
        sharpness,
    } = config;
    if classes < 2 || examples < classes {
        return Err(Error::InvalidConfig(format!(
            "synthetic data needs at least 2 classes and as many examples; got K={classes}, N={examples}"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidConfig(format!("separation must be finite and non-negative, got {separation}")));
    }
    if !(sharpness.is_finite() && sharpness > 0.0) {
        return Err(Error::InvalidConfig(format!("sharpness must be positive, got {sharpness}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = Uniform::new(0, classes).expect("classes >= 2");
    let mut logits = Array2::zeros((examples, classes));
    let mut labels = Vec::with_capacity(examples);
    for mut row in logits.rows_mut() {
        let c = latent.sample(&mut rng);
        for (k, z) in row.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let x = if k == c { separation + noise } else { noise };
            *z = separation * x / sharpness;
        }
        let scaled: Vec<f64> = row.iter().map(|z| z * sharpness).collect();
        let posterior = softmax(&scaled, Temperature::IDENTITY);
        let draw = WeightedIndex::new(&posterior).expect("softmax weights are positive");
        labels.push(draw.sample(&mut rng));
    }
    LogitDataset::new(logits, labels)
}
