//! Orthogonal inference for an interaction coefficient `eta04_l` in
//! `Y1 = theta0 Y2 + eta01 + eta02'(X - eta03) + sum_l eta04_l Y2 (X_l - eta03_l) + eps`
//! with an endogenous `Y2`.
//!
//! The pipeline: fit `p(W) = E[Y2 | W]`; project the outcome on the
//! exogenous analogue `xi_l` of the regressor vector `Q_l`; build the
//! orthogonal instrument `phi = p (X_l - eta03_l) - proj(. | xi_l)`; test or
//! estimate with the moment `(Y1 - gamma'Q_l - eta Y2 (X_l - eta03_l)) phi`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learners::{cross_fit, fit, fit_predict, Fitting, LearnerSpec, OofPredictions};
use crate::linalg;

/// `sd(phi) < DEGENERACY_TOL * sd(zeta)` flags a degenerate instrument.
pub const DEGENERACY_TOL: f64 = 1e-6;
/// Number of null values scanned when inverting the test.
pub const CI_GRID_POINTS: usize = 241;
/// Half-width of the inversion grid in standard errors.
pub const CI_GRID_HALF_WIDTH: f64 = 6.0;

/// `(Y2, 1, X - eta03, Y2 (X_{-l} - eta03_{-l}))` with `l` zero-based.
pub fn build_ql(data: &Dataset, l: usize, eta03: &[f64]) -> Result<DMatrix<f64>> {
    let y2 = data.y2()?.to_vec();
    regressor_block(data, &y2, l, eta03)
}

/// `Q_l` with `p` in place of `Y2`.
pub fn build_xi(data: &Dataset, p: &OofPredictions, l: usize, eta03: &[f64]) -> Result<DMatrix<f64>> {
    build_xi_from(data, &p.values, l, eta03)
}

pub fn build_xi_from(data: &Dataset, p: &[f64], l: usize, eta03: &[f64]) -> Result<DMatrix<f64>> {
    if p.len() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: data.n(),
            found: p.len(),
        });
    }
    regressor_block(data, p, l, eta03)
}

fn regressor_block(data: &Dataset, lead: &[f64], l: usize, eta03: &[f64]) -> Result<DMatrix<f64>> {
    let xt = centered_controls(data, l, eta03)?;
    let n = data.n();
    let d = xt.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(2 * d + 1);
    cols.push(lead.to_vec());
    cols.push(vec![1.0; n]);
    cols.extend(xt.iter().cloned());
    for (j, c) in xt.iter().enumerate() {
        if j != l {
            cols.push(c.iter().zip(lead).map(|(x, y)| x * y).collect());
        }
    }
    Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
}

fn centered_controls(data: &Dataset, l: usize, eta03: &[f64]) -> Result<Vec<Vec<f64>>> {
    let xs = data.x_columns()?;
    if l >= xs.len() {
        return Err(Error::IndexOutOfRange(format!(
            "covariate index {l} with {} controls",
            xs.len()
        )));
    }
    if eta03.len() != xs.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            found: eta03.len(),
        });
    }
    Ok(xs
        .iter()
        .zip(eta03)
        .map(|(c, m)| c.iter().map(|v| v - m).collect())
        .collect())
}

/// Column means of the controls.
pub fn control_means(data: &Dataset) -> Result<Vec<f64>> {
    Ok(data.x_columns()?.iter().map(|c| linalg::mean(c)).collect())
}

/// Map a control name to its zero-based index.
pub fn control_index(data: &Dataset, name: &str) -> Result<usize> {
    data.roles()
        .x
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::IndexOutOfRange(format!("`{name}` is not a control")))
}

/// Residual of the projection of `target` on `xi` (whose second column is
/// the constant). The learner sees `xi` without the constant; linear
/// learners supply their own intercept.
fn project_out(xi: &DMatrix<f64>, target: &[f64], spec: &LearnerSpec, fitting: Fitting) -> Result<Vec<f64>> {
    let fitted = fit_predict(spec, &drop_constant(xi), target, fitting)?;
    Ok(target.iter().zip(&fitted).map(|(a, b)| a - b).collect())
}

fn drop_constant(xi: &DMatrix<f64>) -> DMatrix<f64> {
    xi.clone().remove_column(1)
}

/// `phi = zeta - proj(zeta | xi_l)` with `zeta = p (X_l - eta03_l)`.
pub fn orthogonal_instrument_hte(
    data: &Dataset,
    p: &OofPredictions,
    l: usize,
    eta03: &[f64],
    spec: &LearnerSpec,
    fitting: Fitting,
) -> Result<Vec<f64>> {
    let xi = build_xi(data, p, l, eta03)?;
    let zeta = interaction(data, &p.values, l, eta03)?;
    instrument_from(&xi, &zeta, spec, fitting)
}

fn instrument_from(xi: &DMatrix<f64>, zeta: &[f64], spec: &LearnerSpec, fitting: Fitting) -> Result<Vec<f64>> {
    let phi = project_out(xi, zeta, spec, fitting)?;
    let (s_phi, s_zeta) = (linalg::sd(&phi), linalg::sd(zeta));
    if !(s_phi >= DEGENERACY_TOL * s_zeta) || s_zeta == 0.0 {
        return Err(Error::DegenerateInstrument(format!(
            "sd(phi) = {s_phi:.3e} against sd(zeta) = {s_zeta:.3e}"
        )));
    }
    Ok(phi)
}

/// `lead * (X_l - eta03_l)`.
fn interaction(data: &Dataset, lead: &[f64], l: usize, eta03: &[f64]) -> Result<Vec<f64>> {
    let xs = data.x_columns()?;
    if l >= xs.len() {
        return Err(Error::IndexOutOfRange(format!(
            "covariate index {l} with {} controls",
            xs.len()
        )));
    }
    Ok(xs[l].iter().zip(lead).map(|(x, y)| (x - eta03[l]) * y).collect())
}

/// Injected first steps: `p = E[Y2 | W]` and the control means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HteOracle {
    pub propensity: Vec<f64>,
    pub eta03: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HteConfig {
    /// Zero-based control index.
    pub l: usize,
    pub null: f64,
    /// Step 1 learner for `E[Y2 | W]`.
    pub propensity_learner: LearnerSpec,
    /// Step 3 projection of `zeta` on `xi`.
    pub projection_learner: LearnerSpec,
    pub projection_fitting: Fitting,
    pub k: usize,
    pub seed: u64,
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<HteOracle>,
}

impl Default for HteConfig {
    fn default() -> Self {
        HteConfig {
            l: 0,
            null: 0.0,
            propensity_learner: LearnerSpec::LeastSquares,
            projection_learner: LearnerSpec::LeastSquares,
            projection_fitting: Fitting::InSample,
            k: 5,
            seed: 0,
            level: 0.05,
            oracle: None,
        }
    }
}

impl HteConfig {
    fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::BadSpec(format!("level {} outside (0, 1)", self.level)));
        }
        if !self.null.is_finite() {
            return Err(Error::BadSpec("null value must be finite".into()));
        }
        self.propensity_learner.validate()?;
        self.projection_learner.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HteResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    /// Accepted range of null values; `None` when no grid point is accepted.
    pub ci: Option<[f64; 2]>,
    /// Grid point with the largest p-value when `ci` is empty.
    pub ci_min_p_point: Option<f64>,
    pub eta4_hat: f64,
    pub se: f64,
    pub gamma_hat: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(skip)]
    pub xi: DMatrix<f64>,
    #[serde(skip)]
    pub q: DMatrix<f64>,
    pub moment_values: Vec<f64>,
}

/// Everything shared by the test, the estimate and the interval.
pub struct HtePrepared {
    pub l: usize,
    pub eta03: Vec<f64>,
    pub propensity: Vec<f64>,
    pub q: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    /// `Y2 (X_l - eta03_l)`
    pub y2xl: Vec<f64>,
    pub y1: Vec<f64>,
    pub phi: Vec<f64>,
    zeta: Vec<f64>,
    step2: Step2,
}

enum Step2 {
    /// Closed-form least squares: `gamma(eta) = gamma_a - eta gamma_b`.
    Linear { gamma_a: DVector<f64>, gamma_b: DVector<f64> },
    /// l1-penalized projection with a cross-validated penalty.
    Penalized { folds: usize, seed: u64 },
}

/// Step 1 and Step 3, plus the Step 2 set-up.
pub fn prepare(data: &Dataset, cfg: &HteConfig) -> Result<HtePrepared> {
    cfg.validate()?;
    let (propensity, eta03) = match &cfg.oracle {
        Some(o) => (o.propensity.clone(), o.eta03.clone()),
        None => {
            let p = cross_fit(&cfg.propensity_learner, &data.w_matrix()?, data.y2()?, cfg.k, cfg.seed)?;
            (p.values, control_means(data)?)
        }
    };
    let l = cfg.l;
    let q = build_ql(data, l, &eta03)?;
    let xi = build_xi_from(data, &propensity, l, &eta03)?;
    let zeta = interaction(data, &propensity, l, &eta03)?;
    let phi = instrument_from(&xi, &zeta, &cfg.projection_learner, cfg.projection_fitting)?;
    let y2 = data.y2()?.to_vec();
    let y2xl = interaction(data, &y2, l, &eta03)?;
    let y1 = data.y1()?.to_vec();
    let n = data.n();
    let step2 = if xi.ncols() as f64 > n as f64 / 10.0 {
        Step2::Penalized {
            folds: 4,
            seed: cfg.seed,
        }
    } else {
        Step2::Linear {
            gamma_a: linalg::lstsq(&xi, &DVector::from_column_slice(&y1))?,
            gamma_b: linalg::lstsq(&xi, &DVector::from_column_slice(&y2xl))?,
        }
    };
    Ok(HtePrepared {
        l,
        eta03,
        propensity,
        q,
        xi,
        y2xl,
        y1,
        phi,
        zeta,
        step2,
    })
}

impl HtePrepared {
    /// Step 2 coefficients for the null value `eta`.
    pub fn gamma(&self, eta: f64) -> Result<DVector<f64>> {
        match &self.step2 {
            Step2::Linear { gamma_a, gamma_b } => Ok(gamma_a - gamma_b * eta),
            Step2::Penalized { folds, seed } => {
                let t: Vec<f64> = self.y1.iter().zip(&self.y2xl).map(|(a, b)| a - eta * b).collect();
                penalized_coefficients(&self.xi, &t, *folds, *seed)
            }
        }
    }

    /// Step 4 moment values `(Y1 - gamma'Q - eta Y2 X_l~) phi`.
    pub fn moment(&self, eta: f64) -> Result<Vec<f64>> {
        let gamma = self.gamma(eta)?;
        let fitted = &self.q * &gamma;
        Ok((0..self.y1.len())
            .map(|i| (self.y1[i] - fitted[i] - eta * self.y2xl[i]) * self.phi[i])
            .collect())
    }

    pub fn test(&self, eta: f64, level: f64) -> Result<linalg::MeanZeroTest> {
        linalg::mean_zero_test(&self.moment(eta)?, level)
    }

    /// IV estimate with `phi` as the instrument and a sandwich standard error.
    pub fn estimate(&self) -> Result<(f64, f64, Vec<f64>)> {
        let n = self.y1.len();
        let nf = n as f64;
        let den = linalg::dot(&self.phi, &self.y2xl) / nf;
        if !(den.abs() >= 1e-8 * linalg::sd(&self.phi) * linalg::sd(&self.y2xl)) {
            return Err(Error::DegenerateInstrument(format!(
                "mean(Y2 X_l phi) = {den:.3e}"
            )));
        }
        let mut design = self.xi.clone().insert_column(self.xi.ncols(), 0.0);
        design.column_mut(self.xi.ncols()).copy_from_slice(&self.zeta);
        let gamma_full = match &self.step2 {
            Step2::Linear { .. } => linalg::lstsq(&design, &DVector::from_column_slice(&self.y1))?,
            Step2::Penalized { folds, seed } => penalized_coefficients(&design, &self.y1, *folds, *seed)?,
        };
        let gamma = gamma_full.rows(0, self.xi.ncols()).into_owned();
        let fitted = &self.q * &gamma;
        let ystar: Vec<f64> = (0..n).map(|i| self.y1[i] - fitted[i]).collect();
        let eta = linalg::dot(&self.phi, &ystar) / nf / den;
        let g: Vec<f64> = (0..n).map(|i| (ystar[i] - eta * self.y2xl[i]) * self.phi[i]).collect();
        let se = linalg::sd(&g) / (nf.sqrt() * den.abs());
        Ok((eta, se, gamma.iter().copied().collect()))
    }

    /// Accepted null values on `grid`, as `[min, max]`.
    pub fn invert(&self, grid: &[f64], level: f64) -> Result<[f64; 2]> {
        let tests: Vec<(f64, f64)> = grid
            .par_iter()
            .map(|&eta| Ok((eta, self.test(eta, level)?.p_value)))
            .collect::<Result<_>>()?;
        let accepted: Vec<f64> = tests.iter().filter(|(_, p)| *p >= level).map(|(e, _)| *e).collect();
        if accepted.is_empty() {
            let (min_p_point, min_p) = tests
                .iter()
                .copied()
                .fold((f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            return Err(Error::EmptyInterval { min_p_point, min_p });
        }
        let lo = accepted.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = accepted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok([lo, hi])
    }
}

/// Coefficients in the column order of `design` (whose second column is
/// the constant) from a cross-validated l1 fit on the other columns.
fn penalized_coefficients(design: &DMatrix<f64>, target: &[f64], folds: usize, seed: u64) -> Result<DVector<f64>> {
    let spec = LearnerSpec::l1_cv(folds, seed);
    let model = fit(&spec, &drop_constant(design), target)?;
    let (b0, b) = model
        .linear_coefficients()
        .ok_or_else(|| Error::BadSpec("penalized projection must be linear".into()))?;
    let mut out = DVector::zeros(design.ncols());
    out[0] = b[0];
    out[1] = b0;
    for j in 2..design.ncols() {
        out[j] = b[j - 1];
    }
    Ok(out)
}

/// Equally spaced grid of `CI_GRID_POINTS` values over `center +- 6 se`.
pub fn ci_grid(center: f64, se: f64) -> Vec<f64> {
    let half = CI_GRID_HALF_WIDTH * se;
    let m = CI_GRID_POINTS - 1;
    (0..CI_GRID_POINTS)
        .map(|i| center - half + 2.0 * half * i as f64 / m as f64)
        .collect()
}

fn assemble(prep: HtePrepared, cfg: &HteConfig) -> Result<HteResult> {
    let test = prep.test(cfg.null, cfg.level)?;
    let (eta4_hat, se, gamma_hat) = prep.estimate()?;
    let (ci, ci_min_p_point) = match prep.invert(&ci_grid(eta4_hat, se), cfg.level) {
        Ok(ci) => (Some(ci), None),
        Err(Error::EmptyInterval { min_p_point, .. }) => (None, Some(min_p_point)),
        Err(e) => return Err(e),
    };
    let moment_values = prep.moment(cfg.null)?;
    Ok(HteResult {
        statistic: test.statistic,
        p_value: test.p_value,
        reject: test.reject,
        ci,
        ci_min_p_point,
        eta4_hat,
        se,
        gamma_hat,
        phi: prep.phi,
        xi: prep.xi,
        q: prep.q,
        moment_values,
    })
}

/// Orthogonal test of `eta04_l = cfg.null`, together with the estimate and
/// the inverted-test interval.
pub fn hte_test(data: &Dataset, cfg: &HteConfig) -> Result<HteResult> {
    assemble(prepare(data, cfg)?, cfg)
}

/// Same output as [`hte_test`]; the moment values are evaluated at the
/// estimate rather than the null.
pub fn hte_estimate(data: &Dataset, cfg: &HteConfig) -> Result<HteResult> {
    let prep = prepare(data, cfg)?;
    let (eta, _, _) = prep.estimate()?;
    let at_estimate = prep.moment(eta)?;
    let mut res = assemble(prep, cfg)?;
    res.moment_values = at_estimate;
    Ok(res)
}

/// Interval of null values not rejected on `grid`.
pub fn hte_ci(data: &Dataset, cfg: &HteConfig, grid: &[f64]) -> Result<[f64; 2]> {
    prepare(data, cfg)?.invert(grid, cfg.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DgpSpec, Family, HteDgp, Roles};

    fn tiny() -> Dataset {
        Dataset::new(
            ["y1", "y2", "z2", "x1", "x2"].iter().map(|s| s.to_string()).collect(),
            vec![
                vec![1.0, 2.0, 3.0],
                vec![2.0, -1.0, 0.5],
                vec![0.0, 1.0, 1.0],
                vec![1.0, 2.0, 4.0],
                vec![-1.0, 0.0, 3.0],
            ],
            Roles::new("y1", "y2", &["z2"], &["x1", "x2"]),
        )
        .unwrap()
    }

    #[test]
    fn three_row_regressor_block() {
        let d = tiny();
        let q = build_ql(&d, 0, &[1.0, 0.5]).unwrap();
        let expected = [
            [2.0, 1.0, 0.0, -1.5, -3.0],
            [-1.0, 1.0, 1.0, -0.5, 0.5],
            [0.5, 1.0, 3.0, 2.5, 1.25],
        ];
        assert_eq!(q.shape(), (3, 5));
        for i in 0..3 {
            for j in 0..5 {
                assert!((q[(i, j)] - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_control_has_no_interaction_block() {
        let d = tiny()
            .with_roles(Roles::new("y1", "y2", &["z2"], &["x1"]))
            .unwrap();
        let m = control_means(&d).unwrap();
        let q = build_ql(&d, 0, &m).unwrap();
        assert_eq!(q.ncols(), 3);
        assert!(q.column(2).sum().abs() < 1e-12);
    }

    #[test]
    fn xi_equals_q_when_propensity_is_the_regressor() {
        let d = tiny();
        let y2 = d.y2().unwrap().to_vec();
        let eta03 = control_means(&d).unwrap();
        assert_eq!(
            build_xi_from(&d, &y2, 1, &eta03).unwrap(),
            build_ql(&d, 1, &eta03).unwrap()
        );
        let xi = build_xi_from(&d, &[0.0; 3], 1, &eta03).unwrap();
        assert_eq!(xi.column(0).amax(), 0.0);
        assert_eq!(xi.column(4).amax(), 0.0);
    }

    #[test]
    fn bad_index_and_length() {
        let d = tiny();
        assert!(matches!(build_ql(&d, 2, &[0.0, 0.0]), Err(Error::IndexOutOfRange(_))));
        assert!(matches!(
            build_xi_from(&d, &[0.0; 2], 0, &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn five_row_projection_matches_direct_solve() {
        // xi with columns (p, 1, x), target z; the residual is orthogonal
        // to every column
        let xi = DMatrix::from_row_slice(
            5,
            3,
            &[1.0, 1.0, 0.0, 2.0, 1.0, 1.0, 0.5, 1.0, -1.0, 3.0, 1.0, 2.0, -1.0, 1.0, 0.5],
        );
        let z = [0.3, 1.2, -0.7, 4.0, 0.1];
        let phi = instrument_from(&xi, &z, &LearnerSpec::LeastSquares, Fitting::InSample).unwrap();
        // normal equations solved directly
        let xtx = xi.transpose() * &xi;
        let b = xtx.lu().solve(&(xi.transpose() * DVector::from_column_slice(&z))).unwrap();
        let fitted = &xi * b;
        for i in 0..5 {
            assert!((phi[i] - (z[i] - fitted[i])).abs() < 1e-10);
        }
    }

    fn hte_data(n: usize, seed: u64, dgp: HteDgp) -> (Dataset, HteDgp) {
        let d = DgpSpec::new(Family::Hte(dgp.clone()), n, seed).generate().unwrap();
        (d, dgp)
    }

    #[test]
    fn instrument_is_orthogonal_to_xi_in_sample() {
        let (d, _) = hte_data(500, 1, HteDgp::default());
        let prep = prepare(&d, &HteConfig::default()).unwrap();
        for j in 0..prep.xi.ncols() {
            let c: Vec<f64> = prep.xi.column(j).iter().copied().collect();
            let s = linalg::norm(&c) * linalg::norm(&prep.phi);
            assert!(linalg::dot(&c, &prep.phi).abs() < 1e-8 * s);
        }
    }

    #[test]
    fn step2_normal_equations() {
        let (d, _) = hte_data(500, 2, HteDgp::default());
        let prep = prepare(&d, &HteConfig::default()).unwrap();
        let eta = 0.3;
        let g = prep.gamma(eta).unwrap();
        let fit = &prep.xi * &g;
        let r: Vec<f64> = (0..d.n()).map(|i| prep.y1[i] - eta * prep.y2xl[i] - fit[i]).collect();
        for j in 0..prep.xi.ncols() {
            let c: Vec<f64> = prep.xi.column(j).iter().copied().collect();
            assert!(linalg::dot(&c, &r).abs() < 1e-8 * linalg::norm(&c) * linalg::norm(&r));
        }
    }

    #[test]
    fn deterministic_control_is_degenerate() {
        let (d, dgp) = hte_data(300, 3, HteDgp::default());
        let mut names = d.names().to_vec();
        let mut cols: Vec<Vec<f64>> = names.iter().map(|n| d.column(n).unwrap().to_vec()).collect();
        // x11 = x1, so p X_11 sits in the span of xi
        names.push("x11".into());
        cols.push(d.column("x1").unwrap().to_vec());
        let xs: Vec<String> = (1..=11).map(|j| format!("x{j}")).collect();
        let xr: Vec<&str> = xs.iter().map(|s| s.as_str()).collect();
        let d2 = Dataset::new(names, cols, Roles::new("y1", "y2", &["z2"], &xr)).unwrap();
        let cfg = HteConfig {
            l: 10,
            projection_learner: LearnerSpec::Ridge { lambda: 1e-12 },
            oracle: Some(HteOracle {
                propensity: dgp.oracle_propensity(&d).unwrap(),
                eta03: vec![0.0; 11],
            }),
            ..HteConfig::default()
        };
        assert!(matches!(hte_test(&d2, &cfg), Err(Error::DegenerateInstrument(_))));
    }

    #[test]
    fn interval_contains_estimate_and_nests() {
        let (d, _) = hte_data(1000, 4, HteDgp::default());
        let r = hte_test(&d, &HteConfig::default()).unwrap();
        let ci = r.ci.unwrap();
        assert!(ci[0] <= r.eta4_hat && r.eta4_hat <= ci[1]);
        let narrow = hte_test(
            &d,
            &HteConfig {
                level: 0.5,
                ..HteConfig::default()
            },
        )
        .unwrap()
        .ci
        .unwrap();
        assert!(ci[0] <= narrow[0] && narrow[1] <= ci[1]);
    }

    #[test]
    fn moment_rescaling_leaves_statistic_unchanged() {
        let (d, _) = hte_data(400, 5, HteDgp::default());
        let prep = prepare(&d, &HteConfig::default()).unwrap();
        let g = prep.moment(0.0).unwrap();
        let a = linalg::mean_zero_test(&g, 0.05).unwrap();
        let scaled: Vec<f64> = g.iter().map(|v| 2.5 * v).collect();
        let b = linalg::mean_zero_test(&scaled, 0.05).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-10);
    }

    #[test]
    fn large_sample_estimate_near_truth() {
        let mut dgp = HteDgp::default();
        dgp.eta04[0] = 0.5;
        let (d, dgp) = hte_data(10_000, 6, dgp);
        let cfg = HteConfig {
            oracle: Some(HteOracle {
                propensity: dgp.oracle_propensity(&d).unwrap(),
                eta03: dgp.eta03.clone(),
            }),
            ..HteConfig::default()
        };
        let r = hte_estimate(&d, &cfg).unwrap();
        assert!((r.eta4_hat - 0.5).abs() < 3.0 * r.se, "{} +- {}", r.eta4_hat, r.se);
    }

    #[test]
    fn penalized_step2_matches_dimensions() {
        let dgp = HteDgp::default();
        let (d, _) = hte_data(150, 7, dgp);
        let prep = prepare(&d, &HteConfig::default()).unwrap();
        assert!(matches!(prep.step2, Step2::Penalized { .. }));
        assert_eq!(prep.gamma(0.0).unwrap().len(), prep.q.ncols());
        assert!(prep.moment(0.0).unwrap().iter().all(|v| v.is_finite()));
    }
}
