//! Outlier-aware position-based click models.
//!
//! The crate covers the full counterfactual learning-to-rank loop: corpus
//! loading and synthesis, outlier detection, click simulation, propensity
//! estimation by regression EM, IPS-weighted ranker training and evaluation.
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for common use.

pub mod clicksim;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod learner;
pub mod loglab;
pub mod manifest;
pub mod outliers;
pub mod pipeline;
pub mod propensity_em;
pub mod ranker;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PropensityTableF64 = clicksim::PropensityTable<f64>;
pub type PropensityTableF32 = clicksim::PropensityTable<f32>;
pub type OutlierVerdictF64 = outliers::OutlierVerdict<f64>;
pub type OutlierVerdictF32 = outliers::OutlierVerdict<f32>;
pub type ObservableFeatureSetF64 = outliers::ObservableFeatureSet<f64>;
pub type ObservableFeatureSetF32 = outliers::ObservableFeatureSet<f32>;
pub type PosteriorF64 = propensity_em::Posterior<f64>;
pub type PosteriorF32 = propensity_em::Posterior<f32>;
