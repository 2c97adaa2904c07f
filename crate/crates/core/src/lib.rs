//! Orthogonal (locally robust) moment functions: construction, estimation
//! and numerical verification.
//!
//! * [`plm`]: orthogonal instruments for partly linear models with an
//!   endogenous regressor.
//! * [`hte`]: orthogonal tests, estimates and confidence intervals for
//!   heterogeneous treatment-effect coefficients.
//! * [`funcdiff`]: functional differencing for discrete mixture models.
//! * [`diagnostics`]: Gateaux derivatives, power slopes, drift checks and
//!   score projections.
//! * [`mc`]: a deterministic parallel Monte Carlo driver.

pub mod cli;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod funcdiff;
pub mod hte;
pub mod learners;
pub mod linalg;
pub mod mc;
pub mod plm;

pub use dataset::{load_csv, read_csv, Dataset, DgpSpec, Family, Roles};
pub use error::{Error, Result};
pub use learners::{cross_fit, fit, CrossFitPlan, FittedLearner, LearnerSpec, OofPredictions};
