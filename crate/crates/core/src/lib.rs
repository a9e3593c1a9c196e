//! Finite-state TD(0) policy evaluation with linear features: exact
//! analytic quantities, online simulation, and the all-time concentration
//! bound together with the experiments that probe it.

pub mod analytic;
pub mod bound_calculus;
pub mod error;
pub mod experiment_harness;
pub mod feature_space;
pub mod linalg;
pub mod markov;
pub mod rng;
pub mod schedule;
pub mod td_dynamics;

pub use analytic::{AnalyticSolution, ConstantsBundle, PolicyEvalProblem};
pub use error::{Error, Result};
pub use feature_space::FeatureMap;
pub use markov::{MarkovChain, StationaryDistribution};
pub use schedule::StepSchedule;
