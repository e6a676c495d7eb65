//! Desk-scale causal estimation lab for longitudinal event-sequence data.
//!
//! The crate generates confounded synthetic cohorts with a known ground-truth
//! risk ratio, fits a transformer sequence model with propensity/outcome
//! heads and masked-reconstruction auxiliary objectives, corrects estimates
//! with pooled cross-validated targeted maximum likelihood, and benchmarks
//! the whole stack against logistic-regression baselines.
//!
//! Layers, bottom to top:
//! - [`cohort`]: the data model, feature encoding, and JSONL serialization.
//! - [`synth`]: confounded cohort generation with counterfactual outcomes.
//! - [`model`]: the sequence model, its losses, and five-fold fitting.
//! - [`estimators`]: plug-in RR, TMLE fluctuation, pooled CV-TMLE, SAE.
//! - [`baselines`]: tabular logistic-regression comparison models.
//! - [`bench`]: experiment suites and report emission.

pub mod baselines;
pub mod bench;
pub mod cohort;
pub mod error;
pub mod estimators;
pub mod folds;
pub mod model;
pub mod rng;
pub mod synth;

pub use error::{CelError, Result};
