//! Evidential quantities derived from a single logit vector.
//!
//! A non-negative activation turns logits into evidence `e_k`, which together
//! with base rates `π_k` parameterize a Dirichlet:
//!
//! ```text
//! α_k = e_k + K·π_k        α_0 = Σ α_k
//! p_k = α_k / α_0          (Dirichlet mean, the predictive probability)
//! b_k = e_k / α_0          u = K / α_0        u + Σ b_k = 1
//! ```
//!
//! Per-label quantities built on top: focal uncertainty `U_k = u·π_k`,
//! surprisal `I(k) = -ln p_k`, focal uncertainty surprisal `U_k·I(k)/p_k`,
//! and expected utility `Φ(k) = φ_k·p_k` with `φ = softmax(z / T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::Temperature;

/// Non-negative activation mapping a logit to evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
    Exp,
}

impl Activation {
    /// Upper clamp on the exponent for [`Activation::Exp`].
    pub const EXP_CLAMP: f64 = 30.0;

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            // ln(1 + e^z) = max(z, 0) + ln(1 + e^-|z|), no overflow for large z
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Exp => z.min(Self::EXP_CLAMP).exp(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            "exp" => Ok(Activation::Exp),
            other => Err(Error::InvalidConfig(format!("unknown activation {other:?}"))),
        }
    }
}

/// Prior probability of each label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseRates {
    /// `π_k = 1/K`.
    #[default]
    Uniform,
    Custom(Vec<f64>),
}

impl BaseRates {
    pub fn rate(&self, k: usize, classes: usize) -> f64 {
        match self {
            BaseRates::Uniform => 1.0 / classes as f64,
            BaseRates::Custom(rates) => rates[k],
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, BaseRates::Uniform)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvidentialConfig {
    pub activation: Activation,
    pub base_rates: BaseRates,
    /// Lower clamp applied to probabilities before logs and divisions.
    pub epsilon: f64,
}

impl Default for EvidentialConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            base_rates: BaseRates::Uniform,
            epsilon: 1e-12,
        }
    }
}

impl EvidentialConfig {
    pub fn with_activation(activation: Activation) -> Self {
        Self {
            activation,
            ..Self::default()
        }
    }

    /// Checks the config against a label count.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1e-3], got {}",
                self.epsilon
            )));
        }
        if let BaseRates::Custom(rates) = &self.base_rates {
            if rates.len() != classes {
                return Err(Error::InvalidConfig(format!(
                    "{} base rates for {classes} labels",
                    rates.len()
                )));
            }
            if let Some(bad) = rates.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
                return Err(Error::InvalidConfig(format!("base rate {bad} outside (0, 1)")));
            }
            let total: f64 = rates.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("base rates sum to {total}, not 1")));
            }
        }
        Ok(())
    }

    pub fn base_rate(&self, k: usize, classes: usize) -> f64 {
        self.base_rates.rate(k, classes)
    }

    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.epsilon, 1.0)
    }
}

/// Everything the evidential score needs for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialProfile {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Dirichlet strength.
    pub alpha0: f64,
    /// Predictive probabilities (Dirichlet mean).
    pub p: Vec<f64>,
    /// Belief masses.
    pub b: Vec<f64>,
    /// Epistemic uncertainty.
    pub u: f64,
    /// Position of each label in descending-`p` order; ties go to the lower index.
    pub ranks: Vec<usize>,
    /// Softmax utility `φ`.
    pub utility: Vec<f64>,
}

impl EvidentialProfile {
    pub fn classes(&self) -> usize {
        self.p.len()
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(position) => Err(Error::NonFiniteInput { position }),
        None => Ok(()),
    }
}

pub fn evidence_from_logits(z: &[f64], config: &EvidentialConfig) -> Result<Vec<f64>> {
    check_finite(z)?;
    Ok(z.iter().map(|&v| config.activation.apply(v)).collect())
}

/// Profile with the identity temperature on the utility.
pub fn profile(z: &[f64], config: &EvidentialConfig) -> Result<EvidentialProfile> {
    profile_with_temperature(z, config, Temperature::IDENTITY)
}

/// Evidence comes from the raw logits; only the softmax utility sees `temperature`.
pub fn profile_with_temperature(
    z: &[f64],
    config: &EvidentialConfig,
    temperature: Temperature,
) -> Result<EvidentialProfile> {
    let classes = z.len();
    if classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 labels, got {classes}")));
    }
    let evidence = evidence_from_logits(z, config)?;
    let alpha: Vec<f64> = evidence
        .iter()
        .enumerate()
        .map(|(k, e)| e + classes as f64 * config.base_rate(k, classes))
        .collect();
    let alpha0: f64 = alpha.iter().sum();
    let p: Vec<f64> = alpha.iter().map(|a| a / alpha0).collect();
    let b: Vec<f64> = evidence.iter().map(|e| e / alpha0).collect();
    let u = classes as f64 / alpha0;
    let ranks = descending_ranks(&p);
    let utility = crate::scores::softmax(z, temperature);
    Ok(EvidentialProfile {
        evidence,
        alpha,
        alpha0,
        p,
        b,
        u,
        ranks,
        utility,
    })
}

/// `ranks[k]` is the position of `values[k]` when sorted in descending order,
/// with ties broken by ascending index.
pub fn descending_ranks(values: &[f64]) -> Vec<usize> {
    let order = descending_order(values);
    let mut ranks = vec![0; values.len()];
    for (rank, &k) in order.iter().enumerate() {
        ranks[k] = rank;
    }
    ranks
}

/// Label indices sorted by descending value, ties by ascending index.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps ascending index among equal values
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// `U_k = u·π_k`.
pub fn focal_uncertainty(profile: &EvidentialProfile, config: &EvidentialConfig, k: usize) -> f64 {
    profile.u * config.base_rate(k, profile.classes())
}

/// `I = -ln p`, with `p` clamped to `[epsilon, 1]`.
pub fn surprisal(p: f64, epsilon: f64) -> f64 {
    -p.clamp(epsilon, 1.0).ln()
}

/// `I_U(k) = U_k·I(k)/p_k`.
pub fn focal_uncertainty_surprisal(profile: &EvidentialProfile, config: &EvidentialConfig, k: usize) -> f64 {
    let p = config.clamp(profile.p[k]);
    focal_uncertainty(profile, config, k) * surprisal(p, config.epsilon) / p
}

/// `Φ(k) = φ_k·p_k`.
pub fn expected_utility(profile: &EvidentialProfile, k: usize) -> f64 {
    profile.utility[k] * profile.p[k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn relu() -> EvidentialConfig {
        EvidentialConfig::default()
    }

    #[test]
    fn relu_evidence() {
        assert_eq!(evidence_from_logits(&[2.0, 1.0, -3.0], &relu()).unwrap(), vec![2.0, 1.0, 0.0]);
        assert_eq!(evidence_from_logits(&[-1.0, -2.0, -3.0], &relu()).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let cfg = EvidentialConfig::with_activation(Activation::Softplus);
        let e = evidence_from_logits(&[0.0, 0.0], &cfg).unwrap();
        for v in e {
            assert!((v - std::f64::consts::LN_2).abs() < TOL);
        }
        // overflow-safe branches
        assert_eq!(Activation::Softplus.apply(1000.0), 1000.0);
        assert!(Activation::Softplus.apply(-1000.0) >= 0.0);
        assert_eq!(Activation::Exp.apply(1000.0), 30f64.exp());
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(matches!(
            evidence_from_logits(&[0.0, f64::NAN], &relu()),
            Err(Error::NonFiniteInput { position: 1 })
        ));
        assert!(profile(&[f64::INFINITY, 0.0], &relu()).is_err());
    }

    #[test]
    fn hand_evaluated_profile() {
        let pr = profile(&[2.0, 1.0, 0.0], &relu()).unwrap();
        assert_eq!(pr.evidence, vec![2.0, 1.0, 0.0]);
        assert_eq!(pr.alpha, vec![3.0, 2.0, 1.0]);
        assert_eq!(pr.alpha0, 6.0);
        for (got, want) in pr.p.iter().zip([0.5, 1.0 / 3.0, 1.0 / 6.0]) {
            assert!((got - want).abs() < TOL);
        }
        for (got, want) in pr.b.iter().zip([1.0 / 3.0, 1.0 / 6.0, 0.0]) {
            assert!((got - want).abs() < TOL);
        }
        assert!((pr.u - 0.5).abs() < TOL);
        assert_eq!(pr.ranks, vec![0, 1, 2]);
    }

    #[test]
    fn zero_evidence_profile() {
        let pr = profile(&[-1.0, -0.5, -2.0, 0.0], &relu()).unwrap();
        assert!(pr.evidence.iter().all(|&e| e == 0.0));
        assert!(pr.alpha.iter().all(|&a| a == 1.0));
        assert!(pr.p.iter().all(|&p| (p - 0.25).abs() < TOL));
        assert!(pr.b.iter().all(|&b| b == 0.0));
        assert_eq!(pr.u, 1.0);
        // ties broken by label index
        assert_eq!(pr.ranks, vec![0, 1, 2, 3]);
        let cfg = relu();
        for k in 0..4 {
            assert!((focal_uncertainty(&pr, &cfg, k) - 0.25).abs() < TOL);
        }
    }

    #[test]
    fn focal_uncertainty_of_hand_profile() {
        let cfg = relu();
        let pr = profile(&[2.0, 1.0, 0.0], &cfg).unwrap();
        assert!((focal_uncertainty(&pr, &cfg, 0) - 1.0 / 6.0).abs() < TOL);
        let total: f64 = (0..3).map(|k| focal_uncertainty(&pr, &cfg, k)).sum();
        assert!((total - pr.u).abs() < TOL);
    }

    #[test]
    fn surprisal_values() {
        assert_eq!(surprisal(1.0, 1e-12), 0.0);
        assert!((surprisal((-2f64).exp(), 1e-12) - 2.0).abs() < TOL);
        assert!((surprisal(0.0, 1e-12) - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn focal_uncertainty_surprisal_values() {
        let cfg = relu();
        let pr = profile(&[2.0, 1.0, 0.0], &cfg).unwrap();
        let want = std::f64::consts::LN_2 / 3.0;
        assert!((focal_uncertainty_surprisal(&pr, &cfg, 0) - want).abs() < TOL);
        assert!((want - 0.2310).abs() < 1e-4);

        // p_k = 1 gives zero surprisal whatever U_k is
        let mut certain = pr.clone();
        certain.p = vec![1.0, 0.0, 0.0];
        assert_eq!(focal_uncertainty_surprisal(&certain, &cfg, 0), 0.0);

        // fixed U_k, decreasing p_k increases I_U
        let mut last = 0.0;
        for i in 1..100 {
            let mut pr2 = pr.clone();
            pr2.p[0] = 1.0 - i as f64 / 100.0;
            let v = focal_uncertainty_surprisal(&pr2, &cfg, 0);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn expected_utility_values() {
        let mut pr = profile(&[2.0, 1.0, 0.0], &relu()).unwrap();
        pr.utility[0] = 0.7;
        assert!((expected_utility(&pr, 0) - 0.35).abs() < TOL);

        let pr = profile(&[0.3; 4], &relu()).unwrap();
        for k in 0..4 {
            assert!((expected_utility(&pr, k) - 1.0 / 16.0).abs() < TOL);
        }
    }

    #[test]
    fn config_validation() {
        assert!(relu().validate(3).is_ok());
        let mut cfg = relu();
        cfg.epsilon = 0.01;
        assert!(cfg.validate(3).is_err());
        cfg.epsilon = 0.0;
        assert!(cfg.validate(3).is_err());
        let cfg = EvidentialConfig {
            base_rates: BaseRates::Custom(vec![0.5, 0.3, 0.2]),
            ..relu()
        };
        assert!(cfg.validate(3).is_ok());
        assert!(cfg.validate(4).is_err());
        let cfg = EvidentialConfig {
            base_rates: BaseRates::Custom(vec![0.5, 0.5, 0.2]),
            ..relu()
        };
        assert!(cfg.validate(3).is_err());
        let cfg = EvidentialConfig {
            base_rates: BaseRates::Custom(vec![1.0, 0.0]),
            ..relu()
        };
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn custom_base_rates_enter_alpha() {
        let cfg = EvidentialConfig {
            base_rates: BaseRates::Custom(vec![0.5, 0.25, 0.25]),
            ..relu()
        };
        let pr = profile(&[0.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(pr.alpha, vec![1.5, 0.75, 0.75]);
        assert_eq!(pr.ranks, vec![0, 1, 2]);
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 2..40)
    }

    fn activation() -> impl Strategy<Value = Activation> {
        prop_oneof![Just(Activation::Relu), Just(Activation::Softplus), Just(Activation::Exp)]
    }

    proptest! {
        #[test]
        fn profile_invariants(z in logits(), act in activation()) {
            let cfg = EvidentialConfig::with_activation(act);
            let pr = profile(&z, &cfg).unwrap();
            let k = z.len();
            let psum: f64 = pr.p.iter().sum();
            let bsum: f64 = pr.b.iter().sum();
            let phisum: f64 = pr.utility.iter().sum();
            prop_assert!((psum - 1.0).abs() < 1e-9);
            prop_assert!((pr.u + bsum - 1.0).abs() < 1e-9);
            prop_assert!((phisum - 1.0).abs() < 1e-9);
            prop_assert!(pr.u > 0.0 && pr.u <= 1.0);
            prop_assert!(pr.b.iter().all(|&b| (0.0..1.0).contains(&b)));
            for j in 0..k {
                prop_assert!((pr.alpha[j] - (pr.evidence[j] + 1.0)).abs() < 1e-12);
            }
            let mut seen = pr.ranks.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
            let top = pr.ranks.iter().position(|&r| r == 0).unwrap();
            let pmax = pr.p.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(pr.p[top], pmax);
            prop_assert!(pr.p[..top].iter().all(|&v| v < pmax));
        }

        #[test]
        fn more_evidence_less_uncertainty(z in logits(), j in 0usize..40, extra in 1e-6f64..10.0) {
            let cfg = relu();
            let pr = profile(&z, &cfg).unwrap();
            let j = j % z.len();
            let mut z2 = z.clone();
            // raise the logit above zero so relu evidence strictly increases
            z2[j] = z[j].max(0.0) + extra;
            let pr2 = profile(&z2, &cfg).unwrap();
            prop_assert!(pr2.u < pr.u);
        }

        #[test]
        fn strictly_monotone_activation_preserves_logit_order(
            z in prop::collection::vec(-10.0f64..10.0, 2..30),
            act in prop_oneof![Just(Activation::Softplus), Just(Activation::Exp)],
        ) {
            let pr = profile(&z, &EvidentialConfig::with_activation(act)).unwrap();
            for a in 0..z.len() {
                for b in 0..z.len() {
                    if z[a] > z[b] + 1e-6 {
                        prop_assert!(pr.ranks[a] < pr.ranks[b]);
                    }
                }
            }
        }
    }
}
