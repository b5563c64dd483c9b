//! Illness-death modelling of interval-censored disease onset with
//! semi-competing mortality.

pub mod basis;
pub mod cohort;
pub mod error;
pub mod estimation;
pub mod hazard;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod probabilities;
pub mod quadrature;
pub mod record;
pub mod simulation;

pub use basis::KnotGrid;
pub use error::{Error, Result};
pub use estimation::{fit, hazard_ratios, penalized_loglik, select_smoothing, FitConfig, FittedModel, PenaltyWeights};
pub use hazard::{Baseline, HazardSpec, Transition};
pub use likelihood::{log_likelihood_contribution, total_log_likelihood, LikelihoodOptions, PreparedData};
pub use model::{IllnessDeathModel, IntensityModel, Profiled};
pub use record::{classify_pattern, ObservationPattern, Onset, SubjectRecord};
