pub mod dependence_model;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod likelihood;
pub mod linalg;
pub mod merge_engine;
pub mod scalar;
pub mod simulator;
pub mod spatial_domain;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Sites = spatial_domain::SiteSet<f64>;
pub type Field = dependence_model::DependenceField<f64>;
pub type Panel = simulator::MaximaPanel<f64>;
pub type Fit = estimator::FitResult<f64>;
pub type Penalty = likelihood::PenaltySpec<f64>;
pub type Grids = merge_engine::GridSpec<f64>;
pub type Trace = merge_engine::MergeTrace<f64>;
