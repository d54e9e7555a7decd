//! Evidential conformal prediction over precomputed classifier logits.
//!
//! Logits are turned into Dirichlet evidence, an evidential classification
//! cost scores every candidate label, and split-conformal calibration turns
//! the scores into prediction sets with a marginal coverage guarantee. The
//! crate also implements the APS, RAPS, LAS and plain softmax baselines, the
//! usual coverage and set-size metrics, and a trial runner that reproduces
//! the full evaluation protocol from a logit file.
//!
//! ```
//! use evidential_cp::conformal::{build_sets, calibrate};
//! use evidential_cp::runner::synth::{synth, SynthConfig};
//! use evidential_cp::scores::{Method, ScoreConfig, Temperature};
//!
//! let data = synth(&SynthConfig::new(10, 2.0, 2_000, 1)).unwrap();
//! let scores = ScoreConfig::new(Method::Ecp)
//!     .score(data.logits(), Temperature::IDENTITY)
//!     .unwrap();
//! let holdout: Vec<usize> = (0..1_000).collect();
//! let cal = calibrate(
//!     &scores.select(&holdout).at_labels(&data.labels()[..1_000]),
//!     0.1,
//!     Method::Ecp,
//!     Temperature::IDENTITY,
//! )
//! .unwrap();
//! let sets = build_sets(&scores, cal.q_hat);
//! assert_eq!(sets.len(), 2_000);
//! ```

pub mod conformal;
pub mod dataset;
pub mod error;
pub mod evidential;
pub mod metrics;
pub mod runner;
pub mod scores;

pub use error::{Error, Result};

/// Every guide chapter compiled as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/evidence.md")]
    mod evidence {}
    #[doc = include_str!("../../../book/src/ecc-score.md")]
    mod ecc_score {}
    #[doc = include_str!("../../../book/src/conformal.md")]
    mod conformal {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
