//! Simulation designs, baseline estimators and the replication harness.
//! Double precision only.

pub mod dgp;
pub mod estimators;
pub mod runner;

pub use dgp::{gen_dgp, Design, DgpSpec, Draw, Strength};
pub use estimators::{
    augment_principal_components, combine_halves, estimator_2sls, estimator_kclass, estimator_ridge_split, KClass, KClassVariance,
};
pub use runner::{
    run_replications, size_adjusted_power, EstimatorKind, MetricsRow, MetricsTable, NoSelectPolicy, PowerCurve,
    SimConfig,
};
