//! Bayesian cointegrated vector autoregressions in error-correction form:
//! Metropolis-within-Gibbs sampling of the cointegrating space, rank
//! selection by Bayes factors and BMOS/BMA forecasting.
//!
//! Everything numeric is generic over [`scalar::Real`]; the aliases below fix
//! the scalar to `f64`.

pub mod ecm;
pub mod error;
pub mod forecast;
pub mod gibbs;
pub mod matrix_stats;
pub mod rank;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};

pub type Panel = ecm::TimeSeriesPanel<f64>;
pub type Design = ecm::EcmDesign<f64>;
pub type Prior = ecm::PriorSpec<f64>;
pub type Beta = ecm::ThinBeta<f64>;
pub type Trace = gibbs::ChainTrace<f64>;
pub type State = gibbs::ChainState<f64>;
pub type Config = gibbs::ChainConfig<f64>;
pub type Spd = matrix_stats::SpdMatrix<f64>;
pub type Model = synth::TrueModel<f64>;
