//! Partly linear model `Y1 = theta Y2 + eta(X) + eps` with an endogenous
//! `Y2` and excluded instruments `Z2`: residualization, the orthogonal
//! instrument `zeta(W) = E[Y2 | W] - E[Y2 | X]`, the locally robust
//! estimator and its non-robust baselines.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PlmOracle};
use crate::error::{Error, Result};
use crate::learners::{cross_fit_with_plan, fit_predict, CrossFitPlan, Fitting, LearnerSpec, OofPredictions};
use crate::linalg::{self, MeanZeroTest};

/// Relative floor for `|mean(zeta * Y2~)|` and for the spread of `zeta`.
pub const RELEVANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlmEstimator {
    /// `sum zeta Y1~ / sum zeta Y2~`
    #[serde(rename = "lr-2sls")]
    Lr2sls,
    /// `sum zeta Y1 / sum zeta Y2`
    #[serde(rename = "fs-2sls")]
    Fs2sls,
    /// `sum zeta Y1~ / sum zeta^2`
    Nlr,
    /// `sum Z2 Y1~ / sum Z2 Y2~` with the raw instrument.
    PlugIn,
}

impl PlmEstimator {
    pub fn name(self) -> &'static str {
        match self {
            PlmEstimator::Lr2sls => "lr-2sls",
            PlmEstimator::Fs2sls => "fs-2sls",
            PlmEstimator::Nlr => "nlr",
            PlmEstimator::PlugIn => "plug-in",
        }
    }
}

/// Learners and cross-fitting plan for the three nuisance regressions
/// `E[Y1 | X]`, `E[Y2 | X]` (short) and `E[Y2 | W]` (long).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlmConfig {
    pub short_learner: LearnerSpec,
    pub long_learner: LearnerSpec,
    pub k: usize,
    pub seed: u64,
}

impl Default for PlmConfig {
    fn default() -> Self {
        PlmConfig {
            short_learner: LearnerSpec::LeastSquares,
            long_learner: LearnerSpec::LeastSquares,
            k: 5,
            seed: 0,
        }
    }
}

impl PlmConfig {
    pub fn with_learner(learner: LearnerSpec, k: usize, seed: u64) -> Self {
        PlmConfig {
            short_learner: learner.clone(),
            long_learner: learner,
            k,
            seed,
        }
    }
}

/// Fitted (or injected) nuisance values at every row.
#[derive(Debug, Clone, PartialEq)]
pub struct PlmNuisances {
    /// `E[Y1 | X]`
    pub r1: Vec<f64>,
    /// `E[Y2 | X]`
    pub r2: Vec<f64>,
    /// `E[Y2 | W]`
    pub mu: Vec<f64>,
}

impl PlmNuisances {
    /// Bypass the learners with the true conditional means.
    pub fn from_oracle(oracle: &PlmOracle) -> Self {
        PlmNuisances {
            r1: oracle.r1.clone(),
            r2: oracle.r2.clone(),
            mu: oracle.mu.clone(),
        }
    }

    /// `zeta = mu - r2`.
    pub fn instrument(&self) -> Vec<f64> {
        self.mu.iter().zip(&self.r2).map(|(m, r)| m - r).collect()
    }

    fn check(&self, n: usize) -> Result<()> {
        for v in [&self.r1, &self.r2, &self.mu] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Cross-fit all three nuisance regressions on one shared plan.
pub fn cross_fit_nuisances(data: &Dataset, cfg: &PlmConfig) -> Result<PlmNuisances> {
    let plan = plan_for(data, cfg.k, cfg.seed)?;
    let x = data.x_matrix()?;
    let w = data.w_matrix()?;
    let r1 = cross_fit_with_plan(&cfg.short_learner, &x, data.y1()?, &plan)?.values;
    let r2 = cross_fit_with_plan(&cfg.short_learner, &x, data.y2()?, &plan)?.values;
    let mu = cross_fit_with_plan(&cfg.long_learner, &w, data.y2()?, &plan)?.values;
    Ok(PlmNuisances { r1, r2, mu })
}

fn plan_for(data: &Dataset, k: usize, seed: u64) -> Result<CrossFitPlan> {
    if k < 2 || data.n() < 2 * k {
        return Err(Error::TooFewRows(format!(
            "cross-fitting needs K >= 2 and n >= 2K, got K = {k}, n = {}",
            data.n()
        )));
    }
    CrossFitPlan::new(data.n(), k, seed)
}

/// Residuals `Y_j~ = Y_j - r_j(X)` with out-of-fold `r_j`.
#[derive(Debug, Clone)]
pub struct Residualized {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub r1: OofPredictions,
    pub r2: OofPredictions,
}

pub fn residualize(data: &Dataset, spec: &LearnerSpec, k: usize, seed: u64) -> Result<Residualized> {
    let plan = plan_for(data, k, seed)?;
    let x = data.x_matrix()?;
    let (y1, y2) = (data.y1()?, data.y2()?);
    let r1 = cross_fit_with_plan(spec, &x, y1, &plan)?;
    let r2 = cross_fit_with_plan(spec, &x, y2, &plan)?;
    Ok(Residualized {
        y1: subtract(y1, &r1.values),
        y2: subtract(y2, &r2.values),
        r1,
        r2,
    })
}

fn subtract(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Orthogonal instrument `mu(W) - r2(X)` from out-of-fold long and short
/// regressions of `Y2` on a shared plan.
pub fn oriv_instrument(
    data: &Dataset,
    long: &LearnerSpec,
    short: &LearnerSpec,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let plan = plan_for(data, k, seed)?;
    let y2 = data.y2()?;
    let mu = cross_fit_with_plan(long, &data.w_matrix()?, y2, &plan)?.values;
    let r2 = cross_fit_with_plan(short, &data.x_matrix()?, y2, &plan)?.values;
    Ok(subtract(&mu, &r2))
}

/// Estimation output. `moment_values` are the per-observation moments at
/// `theta_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlmFit {
    pub estimator: PlmEstimator,
    pub theta_hat: f64,
    pub se: f64,
    pub moment_values: Vec<f64>,
    pub instrument: Vec<f64>,
    /// Sample analog of `E[Y2~ zeta]`.
    pub relevance_denominator: f64,
}

/// The pieces every estimator is built from.
struct Parts {
    /// instrument used in the estimating equation
    inst: Vec<f64>,
    /// outcome and regressor in the estimating equation
    y: Vec<f64>,
    d: Vec<f64>,
}

fn parts(data: &Dataset, nuis: &PlmNuisances, estimator: PlmEstimator) -> Result<(Parts, Vec<f64>)> {
    nuis.check(data.n())?;
    let (y1, y2) = (data.y1()?, data.y2()?);
    let y1t = subtract(y1, &nuis.r1);
    let y2t = subtract(y2, &nuis.r2);
    let zeta = nuis.instrument();
    let p = match estimator {
        PlmEstimator::Lr2sls => Parts {
            inst: zeta.clone(),
            y: y1t,
            d: y2t,
        },
        PlmEstimator::Fs2sls => Parts {
            inst: zeta.clone(),
            y: y1.to_vec(),
            d: y2.to_vec(),
        },
        PlmEstimator::Nlr => Parts {
            inst: zeta.clone(),
            y: y1t,
            d: zeta.clone(),
        },
        PlmEstimator::PlugIn => Parts {
            inst: data.z2_columns()?[0].to_vec(),
            y: y1t,
            d: y2t,
        },
    };
    Ok((p, zeta))
}

fn check_relevance(inst: &[f64], d: &[f64], reference: &[f64]) -> Result<f64> {
    let n = inst.len() as f64;
    let den = linalg::dot(inst, d) / n;
    let s_inst = linalg::sd(inst);
    let s_ref = linalg::sd(reference);
    if s_inst <= RELEVANCE_TOL * s_ref || !(den.abs() >= RELEVANCE_TOL * s_inst * linalg::sd(d)) || den == 0.0 {
        return Err(Error::IrrelevantInstrument(format!(
            "mean(instrument * regressor) = {den:.3e}, sd(instrument) = {s_inst:.3e}"
        )));
    }
    Ok(den)
}

/// Solve the estimating equation `mean((y - theta d) inst) = 0` with a
/// sandwich standard error.
pub fn estimate(data: &Dataset, nuis: &PlmNuisances, estimator: PlmEstimator) -> Result<PlmFit> {
    let (p, zeta) = parts(data, nuis, estimator)?;
    let reference = subtract(data.y2()?, &nuis.r2);
    let den = check_relevance(&p.inst, &p.d, &reference)?;
    let n = p.inst.len() as f64;
    let theta_hat = linalg::dot(&p.inst, &p.y) / n / den;
    let g: Vec<f64> = (0..p.inst.len())
        .map(|i| (p.y[i] - theta_hat * p.d[i]) * p.inst[i])
        .collect();
    let se = linalg::sd(&g) / (n.sqrt() * den.abs());
    let relevance_denominator = linalg::dot(&zeta, &reference) / n;
    Ok(PlmFit {
        estimator,
        theta_hat,
        se,
        moment_values: g,
        instrument: p.inst,
        relevance_denominator,
    })
}

pub fn estimate_lr_2sls(data: &Dataset, cfg: &PlmConfig) -> Result<PlmFit> {
    estimate(data, &cross_fit_nuisances(data, cfg)?, PlmEstimator::Lr2sls)
}

pub fn estimate_fs2sls(data: &Dataset, cfg: &PlmConfig) -> Result<PlmFit> {
    estimate(data, &cross_fit_nuisances(data, cfg)?, PlmEstimator::Fs2sls)
}

pub fn estimate_nlr(data: &Dataset, cfg: &PlmConfig) -> Result<PlmFit> {
    estimate(data, &cross_fit_nuisances(data, cfg)?, PlmEstimator::Nlr)
}

/// Per-observation moment `(y - theta d) inst` of an estimator.
pub fn estimator_moment(data: &Dataset, nuis: &PlmNuisances, estimator: PlmEstimator, theta: f64) -> Result<Vec<f64>> {
    let (p, _) = parts(data, nuis, estimator)?;
    Ok((0..p.inst.len())
        .map(|i| (p.y[i] - theta * p.d[i]) * p.inst[i])
        .collect())
}

/// Per-observation locally robust moment `(Y1~ - theta Y2~) zeta`.
pub fn lr_moment(data: &Dataset, nuis: &PlmNuisances, theta: f64) -> Result<Vec<f64>> {
    estimator_moment(data, nuis, PlmEstimator::Lr2sls, theta)
}

/// Score test of `theta = theta_bar` based on the locally robust moment.
pub fn score_test_theta(data: &Dataset, nuis: &PlmNuisances, theta_bar: f64, level: f64) -> Result<MeanZeroTest> {
    linalg::mean_zero_test(&lr_moment(data, nuis, theta_bar)?, level)
}

/// Feature dictionary `b(X)` for the projection-restricted instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dictionary {
    /// `b(X) = 1`
    Constant,
    /// `b(X) = (1, X)`
    Linear,
    /// `b(X) = (1, X, X_j^2)`
    Quadratic,
    /// `b(X) = (1, X, X_j X_k for j <= k)`
    FullQuadratic,
}

impl Dictionary {
    /// Non-constant dictionary columns; the constant is carried by the
    /// learners' intercept.
    pub fn expand(self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = x.shape();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        if self != Dictionary::Constant {
            for j in 0..d {
                cols.push(x.column(j).iter().copied().collect());
            }
        }
        match self {
            Dictionary::Quadratic => {
                for j in 0..d {
                    cols.push(x.column(j).iter().map(|v| v * v).collect());
                }
            }
            Dictionary::FullQuadratic => {
                for j in 0..d {
                    for k in j..d {
                        cols.push((0..n).map(|i| x[(i, j)] * x[(i, k)]).collect());
                    }
                }
            }
            _ => {}
        }
        DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
    }
}

/// `zeta = P_G Y2 - P_Gx (P_G Y2)` where `G = span{b(X), Z2 b(X)}` and
/// `Gx = span{b(X)}`, each projection computed by `projection`.
pub fn hd_gamma_instrument(
    data: &Dataset,
    dictionary: Dictionary,
    projection: &LearnerSpec,
    fitting: Fitting,
) -> Result<Vec<f64>> {
    let z2 = data.z2_columns()?;
    if z2.len() != 1 {
        return Err(Error::NonBinaryInstrument(format!(
            "expected one instrument column, found {}",
            z2.len()
        )));
    }
    let z = z2[0];
    if let Some(v) = z.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::NonBinaryInstrument(format!("value {v} is not 0 or 1")));
    }
    let b = dictionary.expand(&data.x_matrix()?);
    let (n, k) = b.shape();
    let gamma = DMatrix::from_fn(n, 2 * k + 1, |i, j| {
        if j < k {
            b[(i, j)]
        } else if j == k {
            z[i]
        } else {
            z[i] * b[(i, j - k - 1)]
        }
    });
    let long = fit_predict(projection, &gamma, data.y2()?, fitting)?;
    let short = fit_predict(projection, &b, &long, fitting)?;
    Ok(subtract(&long, &short))
}
