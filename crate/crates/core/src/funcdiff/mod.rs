//! Functional differencing for discrete mixture models, plus the continuous
//! normal-means, marginal-effect and random-coefficient cases.

pub mod ame;
pub mod model;
pub mod moments;
pub mod normal_means;
pub mod random_coef;

pub use ame::{ame_moment, fit_linear_mu, AmeResult, LinearMu};
pub use model::{DiscreteMixtureModel, ModelFile, PmfFamily};
pub use moments::*;
pub use normal_means::{normal_means_moment, NormalMeansMoment};
pub use random_coef::{conditional_means, random_coefficient_estimate, random_coefficient_moment, BinMean};
