//! Bayesian meta-analysis of aggregate clinical-event data.
//!
//! Arm-level counts of patients, events, drop-outs and fatal events are
//! modelled through a five-category exponential timeline model. On top of
//! the exact aggregate-data likelihood sit common-effect and random-effects
//! hierarchical models for the log hazard ratio, meta-analytic-predictive
//! priors derived from historical control arms, an adaptive Metropolis
//! sampler, and a simulation engine for operating characteristics.

pub mod data;
pub mod error;
pub mod event_model;
pub mod exec;
pub mod map_prior;
pub mod math;
pub mod mixture;
pub mod model;
pub mod prior;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod sim;

pub use data::{ArmRecord, ArmRole, DataFormat, Dataset, TrialRecord, Violation};
pub use error::{Error, Result};
pub use event_model::{CategoryProbs, FeasibleRange, RateParams};
pub use map_prior::MixturePrior;
pub use model::{Anchor, Borrowing, EffectStructure, HierModel, ModelSpec, ParamState};
pub use prior::PriorSpec;
pub use sampler::{PosteriorDraws, SamplerConfig, Summary};
