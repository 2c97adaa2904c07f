//! First-step regression learners with a shared fit/predict contract and the
//! K-fold cross-fitting engine.

mod crossfit;
mod lasso;
mod trees;

pub use crossfit::{cross_fit, cross_fit_with_plan, fit_predict, CrossFitPlan, Fitting, OofPredictions};
pub use lasso::{lambda_max, lasso_objective, LassoTrace};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

fn default_cv_folds() -> usize {
    4
}

fn default_rounds() -> usize {
    100
}

fn default_depth() -> usize {
    2
}

fn default_learning_rate() -> f64 {
    0.1
}

fn default_min_leaf() -> usize {
    5
}

/// A regression method and its hyperparameters.
///
/// Serialized as `{"method": "...", "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "params", rename_all = "kebab-case")]
pub enum LearnerSpec {
    /// Predicts the training mean.
    Constant,
    LeastSquares,
    /// `(1/2n)||y - b0 - X b||^2 + (lambda/2)||b||^2`, intercept unpenalized.
    Ridge { lambda: f64 },
    /// `(1/2n)||y - b0 - X b||^2 + lambda ||b||_1`; without `lambda` the
    /// penalty is chosen by `cv_folds`-fold cross-validation.
    L1Penalized {
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default = "default_cv_folds")]
        cv_folds: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Nadaraya-Watson with a Gaussian product kernel. Without `bandwidth`
    /// each feature gets `1.06 sd n^(-1/5)`.
    KernelSmoother {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    /// Gradient-boosted regression trees under squared loss.
    BoostedStumps {
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default = "default_learning_rate")]
        learning_rate: f64,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
    },
    KNearest { k: usize },
}

impl LearnerSpec {
    pub fn l1(lambda: f64) -> Self {
        LearnerSpec::L1Penalized {
            lambda: Some(lambda),
            cv_folds: default_cv_folds(),
            seed: 0,
        }
    }

    pub fn l1_cv(cv_folds: usize, seed: u64) -> Self {
        LearnerSpec::L1Penalized {
            lambda: None,
            cv_folds,
            seed,
        }
    }

    pub fn boosted(rounds: usize, depth: usize, learning_rate: f64) -> Self {
        LearnerSpec::BoostedStumps {
            rounds,
            depth,
            learning_rate,
            min_leaf: default_min_leaf(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Constant => "constant",
            LearnerSpec::LeastSquares => "least-squares",
            LearnerSpec::Ridge { .. } => "ridge",
            LearnerSpec::L1Penalized { .. } => "l1-penalized",
            LearnerSpec::KernelSmoother { .. } => "kernel-smoother",
            LearnerSpec::BoostedStumps { .. } => "boosted-stumps",
            LearnerSpec::KNearest { .. } => "k-nearest",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSpec(m.to_string()));
        match self {
            LearnerSpec::Ridge { lambda } if !(*lambda >= 0.0) => bad("ridge lambda must be >= 0"),
            LearnerSpec::L1Penalized { lambda: Some(l), .. } if !(*l >= 0.0) => {
                bad("l1 lambda must be >= 0")
            }
            LearnerSpec::L1Penalized { cv_folds, lambda: None, .. } if *cv_folds < 2 => {
                bad("cv_folds must be >= 2")
            }
            LearnerSpec::KernelSmoother { bandwidth: Some(h) } if !(*h > 0.0) => {
                bad("bandwidth must be > 0")
            }
            LearnerSpec::BoostedStumps { rounds, depth, learning_rate, .. }
                if *rounds < 1 || *depth < 1 || !(*learning_rate > 0.0) =>
            {
                bad("boosting needs rounds >= 1, depth >= 1, learning_rate > 0")
            }
            LearnerSpec::KNearest { k } if *k < 1 => bad("k must be >= 1"),
            _ => Ok(()),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: LearnerSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        LearnerSpec::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
enum Model {
    Constant(f64),
    Linear { intercept: f64, coef: DVector<f64> },
    Kernel { x: DMatrix<f64>, y: Vec<f64>, bandwidth: Vec<f64> },
    Boosted(trees::Ensemble),
    Neighbors { x: DMatrix<f64>, y: Vec<f64>, k: usize },
}

/// An immutable fitted predictor.
#[derive(Debug, Clone)]
pub struct FittedLearner {
    dim: usize,
    model: Model,
}

impl FittedLearner {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Intercept and slopes of linear fits (least squares, ridge, l1).
    pub fn linear_coefficients(&self) -> Option<(f64, &DVector<f64>)> {
        match &self.model {
            Model::Linear { intercept, coef } => Some((*intercept, coef)),
            _ => None,
        }
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: features.ncols(),
            });
        }
        let m = features.nrows();
        Ok(match &self.model {
            Model::Constant(c) => vec![*c; m],
            Model::Linear { intercept, coef } => {
                let p = features * coef;
                p.iter().map(|v| v + intercept).collect()
            }
            Model::Kernel { x, y, bandwidth } => (0..m)
                .map(|i| kernel_predict(x, y, bandwidth, features, i))
                .collect(),
            Model::Boosted(e) => (0..m).map(|i| e.predict_row(features, i)).collect(),
            Model::Neighbors { x, y, k } => (0..m)
                .map(|i| knn_predict(x, y, *k, features, i))
                .collect(),
        })
    }
}

/// Fit a learner to `n x d` features and an `n`-vector target.
pub fn fit(spec: &LearnerSpec, features: &DMatrix<f64>, target: &[f64]) -> Result<FittedLearner> {
    spec.validate()?;
    let (n, d) = features.shape();
    if n == 0 {
        return Err(Error::TooFewRows("cannot fit on zero rows".into()));
    }
    if target.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: target.len(),
        });
    }
    if features.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("learner input".into()));
    }
    let model = match spec {
        LearnerSpec::Constant => Model::Constant(linalg::mean(target)),
        LearnerSpec::LeastSquares => least_squares(features, target)?,
        LearnerSpec::Ridge { lambda } => ridge(features, target, *lambda)?,
        LearnerSpec::L1Penalized { lambda, cv_folds, seed } => {
            let lam = match lambda {
                Some(l) => *l,
                None => lasso::cv_lambda(features, target, *cv_folds, *seed)?,
            };
            let (intercept, coef) = lasso::fit_lasso(features, target, lam, None);
            Model::Linear { intercept, coef }
        }
        LearnerSpec::KernelSmoother { bandwidth } => {
            let bw = match bandwidth {
                Some(h) => vec![*h; d],
                None => silverman_bandwidths(features),
            };
            Model::Kernel {
                x: features.clone(),
                y: target.to_vec(),
                bandwidth: bw,
            }
        }
        LearnerSpec::BoostedStumps { rounds, depth, learning_rate, min_leaf } => Model::Boosted(
            trees::Ensemble::fit(features, target, *rounds, *depth, *learning_rate, *min_leaf),
        ),
        LearnerSpec::KNearest { k } => Model::Neighbors {
            x: features.clone(),
            y: target.to_vec(),
            k: (*k).min(n),
        },
    };
    Ok(FittedLearner { dim: d, model })
}

/// Append a leading column of ones.
fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

fn least_squares(x: &DMatrix<f64>, y: &[f64]) -> Result<Model> {
    let design = with_intercept(x);
    let beta = linalg::lstsq(&design, &DVector::from_column_slice(y))?;
    Ok(Model::Linear {
        intercept: beta[0],
        coef: beta.rows(1, x.ncols()).into_owned(),
    })
}

/// Column means and the centered copy of `x`.
fn center(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let means: Vec<f64> = x
        .column_iter()
        .map(|c| linalg::mean(c.as_slice()))
        .collect();
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - means[j]);
    (means, xc)
}

fn ridge(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<Model> {
    let n = x.nrows() as f64;
    let (xm, xc) = center(x);
    let ym = linalg::mean(y);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ym));
    let mut gram = xc.transpose() * &xc / n;
    for j in 0..gram.nrows() {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc / n;
    let coef = if gram.nrows() == 0 {
        DVector::zeros(0)
    } else {
        gram.cholesky()
            .ok_or_else(|| Error::RankDeficient("ridge normal equations are singular".into()))?
            .solve(&rhs)
    };
    let intercept = ym - xm.iter().zip(coef.iter()).map(|(m, b)| m * b).sum::<f64>();
    Ok(Model::Linear { intercept, coef })
}

/// `1.06 sd n^(-1/5)` per column; constant columns get bandwidth 1.
pub fn silverman_bandwidths(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let s = linalg::sd(c.as_slice());
            if s > 0.0 {
                1.06 * s * n.powf(-0.2)
            } else {
                1.0
            }
        })
        .collect()
}

fn kernel_predict(x: &DMatrix<f64>, y: &[f64], bw: &[f64], q: &DMatrix<f64>, row: usize) -> f64 {
    let logw: Vec<f64> = (0..x.nrows())
        .map(|i| {
            -0.5 * (0..x.ncols())
                .map(|j| ((q[(row, j)] - x[(i, j)]) / bw[j]).powi(2))
                .sum::<f64>()
        })
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    linalg::dot(&w, y) / linalg::neumaier_sum(w.iter().copied())
}

fn knn_predict(x: &DMatrix<f64>, y: &[f64], k: usize, q: &DMatrix<f64>, row: usize) -> f64 {
    let mut dist: Vec<(f64, usize)> = (0..x.nrows())
        .map(|i| {
            let d2: f64 = (0..x.ncols()).map(|j| (q[(row, j)] - x[(i, j)]).powi(2)).sum();
            (d2, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist[..k].iter().map(|(_, i)| y[*i]).sum::<f64>() / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn least_squares_recovers_exact_slope() {
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.5]);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let f = fit(&LearnerSpec::LeastSquares, &x, &y).unwrap();
        let (b0, b) = f.linear_coefficients().unwrap();
        assert!((b[0] - 2.0).abs() < 1e-10 && b0.abs() < 1e-10);
        let p = f.predict(&x).unwrap();
        for (pi, yi) in p.iter().zip(&y) {
            assert!((pi - yi).abs() < 1e-10);
        }
    }

    #[test]
    fn least_squares_rejects_singular_design() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let r = fit(&LearnerSpec::LeastSquares, &x, &[1.0, 2.0, 3.0]);
        assert!(matches!(r, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn huge_ridge_penalty_shrinks_to_zero() {
        let x = random_matrix(200, 3, 1);
        let y: Vec<f64> = (0..200).map(|i| x[(i, 0)] * 3.0 - x[(i, 2)]).collect();
        let f = fit(&LearnerSpec::Ridge { lambda: 1e8 }, &x, &y).unwrap();
        assert!(f.linear_coefficients().unwrap().1.amax() < 1e-4);
    }

    #[test]
    fn predict_checks_dimension() {
        let x = random_matrix(10, 2, 2);
        let f = fit(&LearnerSpec::Constant, &x, &[1.0; 10]).unwrap();
        let bad = random_matrix(3, 3, 3);
        assert!(matches!(f.predict(&bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_split_boosting_predicts_the_mean() {
        // min_leaf larger than n/2 leaves no admissible split
        let x = random_matrix(20, 2, 4);
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let spec = LearnerSpec::BoostedStumps {
            rounds: 10,
            depth: 2,
            learning_rate: 0.5,
            min_leaf: 11,
        };
        let p = fit(&spec, &x, &y).unwrap().predict(&x).unwrap();
        for v in p {
            assert!((v - 9.5).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_kernel_gives_the_mean() {
        let x = random_matrix(50, 2, 5);
        let y: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let spec = LearnerSpec::KernelSmoother {
            bandwidth: Some(1e6),
        };
        let p = fit(&spec, &x, &y).unwrap().predict(&x).unwrap();
        let m = linalg::mean(&y);
        assert!(p.iter().all(|v| (v - m).abs() < 1e-6));
    }

    #[test]
    fn boosting_fits_a_step() {
        let x = random_matrix(400, 2, 6);
        let y: Vec<f64> = (0..400).map(|i| if x[(i, 1)] > 0.3 { 2.0 } else { -1.0 }).collect();
        let p = fit(&LearnerSpec::boosted(200, 1, 0.1), &x, &y)
            .unwrap()
            .predict(&x)
            .unwrap();
        let mse: f64 = p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 400.0;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn one_nearest_neighbour_interpolates() {
        let x = random_matrix(30, 3, 7);
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let p = fit(&LearnerSpec::KNearest { k: 1 }, &x, &y)
            .unwrap()
            .predict(&x)
            .unwrap();
        assert_eq!(p, y);
    }

    #[test]
    fn spec_json_round_trip() {
        let specs = vec![
            LearnerSpec::Constant,
            LearnerSpec::LeastSquares,
            LearnerSpec::Ridge { lambda: 0.5 },
            LearnerSpec::l1(0.1),
            LearnerSpec::l1_cv(4, 3),
            LearnerSpec::KernelSmoother { bandwidth: None },
            LearnerSpec::boosted(50, 2, 0.1),
            LearnerSpec::KNearest { k: 7 },
        ];
        for s in specs {
            let text = serde_json::to_string(&s).unwrap();
            assert_eq!(LearnerSpec::from_json_str(&text).unwrap(), s);
        }
        let parsed = LearnerSpec::from_json_str(r#"{"method": "l1-penalized", "params": {"cv_folds": 4}}"#)
            .unwrap();
        assert_eq!(parsed, LearnerSpec::l1_cv(4, 0));
        assert!(LearnerSpec::from_json_str(r#"{"method": "ridge", "params": {"lambda": -1}}"#).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(
            fit(&LearnerSpec::Constant, &x, &[1.0, 2.0]),
            Err(Error::NonFinite(_))
        ));
    }
}
