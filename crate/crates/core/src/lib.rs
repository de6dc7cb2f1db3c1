pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod first_stage;
pub mod iv;
pub mod lasso;
pub mod linalg;
pub mod montecarlo;
pub mod scalar;
pub mod weak_id;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type FirstStageFit64 = first_stage::FirstStageFit<f64>;
pub type IvEstimate64 = iv::IvEstimate<f64>;
pub type LassoFit64 = lasso::LassoFit<f64>;
pub type PenaltyPlan64 = lasso::PenaltyPlan<f64>;
pub type SupScoreProblem64 = weak_id::SupScoreProblem<f64>;
