//! Numerical checks of local robustness: Gateaux derivatives of moment
//! expectations along perturbation paths, power slopes, drift under local
//! alternatives, and projection of moments off nuisance scores.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DgpSpec, Family, HteDgp, PlmDgp, PlmOracle};
use crate::error::{Error, Result};
use crate::funcdiff::DiscreteMixtureModel;
use crate::hte::{build_ql, build_xi_from};
use crate::linalg;
use crate::mc::replication_seed;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Which nuisance function or vector an additive path moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceComponent {
    /// Control function `eta0(X)` of the outcome equation.
    Eta,
    /// `E[Y2 | X]`-part of the first stage, shifting every mean of `Y2`.
    FirstStage,
    /// `E[Y2 | W]` alone.
    LongRegression,
    /// `p(W) = E[Y2 | W]` in the interacted model.
    Propensity,
    /// Control means `eta03`.
    Centering,
    /// Coefficients on the regressor vector `Q_l`.
    StepTwo,
}

/// `b(x) = scale (1 + tanh(a'x + shift))`: smooth, bounded and positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanhBump {
    pub a: Vec<f64>,
    #[serde(default)]
    pub shift: f64,
    pub scale: f64,
}

impl TanhBump {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.scale * (1.0 + (linalg::dot(&self.a, &x[..self.a.len()]) + self.shift).tanh())
    }
}

/// `count` bumps on `dim` features with `a ~ N(0, I/dim)` and
/// `shift ~ N(0, 1)`.
pub fn random_bumps(dim: usize, count: usize, scale: f64, seed: u64) -> Vec<TanhBump> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (dim as f64).sqrt();
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    (0..count)
        .map(|_| {
            let a = (0..dim).map(|_| s * normal()).collect();
            TanhBump {
                a,
                shift: normal(),
                scale,
            }
        })
        .collect()
}

/// `count` directions on a grid, centered under `eta` and with `max |b| = 1`.
pub fn random_density_directions(eta: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u: Vec<f64> = eta.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
            let m = linalg::dot(&u, eta);
            let b: Vec<f64> = u.iter().map(|v| v - m).collect();
            let top = b.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            if top > 0.0 {
                b.iter().map(|v| v / top).collect()
            } else {
                b
            }
        })
        .collect()
}

/// A one-dimensional path through the nuisance or parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationPath {
    /// `h_tau = h0 + tau b` for a nuisance function `h0`.
    Additive { component: NuisanceComponent, bump: TanhBump },
    /// `v_tau = v0 + tau direction` for a nuisance vector.
    AdditiveVector { component: NuisanceComponent, direction: Vec<f64> },
    /// `eta_tau = eta0 (1 + tau b)` on a grid.
    MultiplicativeDensity { direction: Vec<f64> },
    /// `theta_tau = theta0 + tau delta`.
    Parameter { delta: Vec<f64> },
}

impl PerturbationPath {
    /// Size of the direction, used to scale tolerances.
    pub fn magnitude(&self) -> f64 {
        match self {
            PerturbationPath::Additive { bump, .. } => bump.scale,
            PerturbationPath::AdditiveVector { direction, .. } => linalg::norm(direction),
            PerturbationPath::MultiplicativeDensity { direction } => {
                direction.iter().fold(0.0, |a, v| a.max(v.abs()))
            }
            PerturbationPath::Parameter { delta } => linalg::norm(delta),
        }
    }
}

/// `tau -> E[g]` along paths.
pub trait PathFunctional: Sync {
    fn expectation(&self, path: &PerturbationPath, tau: f64) -> Result<f64>;
    /// Magnitude of the moment, for relative tolerances.
    fn scale(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateauxEstimate {
    /// Central difference at `h`.
    pub coarse: f64,
    /// Central difference at `h / 2`.
    pub fine: f64,
    /// `(4 fine - coarse) / 3`.
    pub richardson: f64,
    /// The two steps agree to `O(h^2)`.
    pub consistent: bool,
    pub h: f64,
}

pub fn gateaux_derivative(f: &dyn PathFunctional, path: &PerturbationPath, h: f64) -> Result<GateauxEstimate> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidStep(format!("step {h} must be positive")));
    }
    let central = |s: f64| -> Result<f64> { Ok((f.expectation(path, s)? - f.expectation(path, -s)?) / (2.0 * s)) };
    let coarse = central(h)?;
    let fine = central(h / 2.0)?;
    let richardson = (4.0 * fine - coarse) / 3.0;
    let slack = 10.0 * h * h * (richardson.abs() + f.scale() * path.magnitude()) + 1e-9 * f.scale();
    Ok(GateauxEstimate {
        coarse,
        fine,
        richardson,
        consistent: (coarse - fine).abs() <= slack,
        h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub derivatives: Vec<f64>,
    pub coarse: Vec<f64>,
    pub max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Every direction passed the step-halving check.
    pub consistent: bool,
}

/// Richardson derivatives along every path (in parallel); passes when the
/// largest magnitude is at most `tolerance`.
pub fn verify_orthogonality(
    f: &dyn PathFunctional,
    paths: &[PerturbationPath],
    h: f64,
    tolerance: f64,
) -> Result<OrthogonalityReport> {
    let est: Vec<GateauxEstimate> = paths
        .par_iter()
        .map(|p| gateaux_derivative(f, p, h))
        .collect::<Result<_>>()?;
    let derivatives: Vec<f64> = est.iter().map(|e| e.richardson).collect();
    let max_abs = derivatives.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    Ok(OrthogonalityReport {
        coarse: est.iter().map(|e| e.coarse).collect(),
        derivatives,
        max_abs,
        tolerance,
        pass: max_abs <= tolerance,
        consistent: est.iter().all(|e| e.consistent),
    })
}

/// `d/dtau E[g(theta0 + tau delta)]` at `tau = 0`.
pub fn power_slope(f: &dyn PathFunctional, delta: &[f64], h: f64) -> Result<f64> {
    let path = PerturbationPath::Parameter { delta: delta.to_vec() };
    Ok(gateaux_derivative(f, &path, h)?.richardson)
}

fn unsupported(path: &PerturbationPath, what: &str) -> Error {
    Error::BadSpec(format!("path {path:?} does not apply to {what}"))
}

// ---- partly linear model -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlmMomentKind {
    /// `(Y1 - r1 - theta (Y2 - r2)) (mu - r2)`
    Orthogonal,
    /// `(Y1 - theta Y2 - eta) Z2`
    PlugIn,
}

/// Moment expectations for the partly linear model on a conditional sample
/// (outcomes replaced by their means given `W`, rows weighted by
/// `P(Z2 | X)`), so nuisance paths are evaluated without outcome noise.
pub struct PlmMoment {
    pub kind: PlmMomentKind,
    pub theta: f64,
    data: Dataset,
    weights: Vec<f64>,
    oracle: PlmOracle,
    x_rows: Vec<Vec<f64>>,
    w_rows: Vec<Vec<f64>>,
    scale: f64,
}

impl PlmMoment {
    pub fn new(dgp: &PlmDgp, kind: PlmMomentKind, draws: usize, seed: u64) -> Result<Self> {
        let (data, weights) = dgp.conditional_sample(draws, seed)?;
        let oracle = dgp.oracle(&data)?;
        let x = data.x_matrix()?;
        let z = data.column("z2")?.to_vec();
        let x_rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        let w_rows = x_rows
            .iter()
            .zip(&z)
            .map(|(r, zi)| {
                let mut v = r.clone();
                v.push(*zi);
                v
            })
            .collect();
        let inst: Vec<f64> = match kind {
            PlmMomentKind::Orthogonal => oracle.mu.iter().zip(&oracle.r2).map(|(m, r)| m - r).collect(),
            PlmMomentKind::PlugIn => z,
        };
        let scale = inst.iter().zip(&weights).map(|(v, w)| w * v * v).sum::<f64>().sqrt();
        Ok(PlmMoment {
            kind,
            theta: dgp.theta0,
            data,
            weights,
            oracle,
            x_rows,
            w_rows,
            scale,
        })
    }

    /// The weighted conditional sample and its weights.
    pub fn sample(&self) -> (&Dataset, &[f64]) {
        (&self.data, &self.weights)
    }

    /// Rows of `X` in the conditional sample.
    pub fn x_rows(&self) -> &[Vec<f64>] {
        &self.x_rows
    }

    /// `E_w[zeta*^2]`.
    pub fn instrument_second_moment(&self) -> f64 {
        let o = &self.oracle;
        (0..self.weights.len())
            .map(|i| self.weights[i] * (o.mu[i] - o.r2[i]).powi(2))
            .sum()
    }

    /// Weighted mean of `f(row)` over the conditional sample.
    pub fn weighted_mean<F: Fn(&[f64], f64) -> f64>(&self, f: F) -> Result<f64> {
        let z = self.data.column("z2")?;
        Ok(linalg::neumaier_sum(
            (0..self.weights.len()).map(|i| self.weights[i] * f(&self.x_rows[i], z[i])),
        ))
    }
}

impl PathFunctional for PlmMoment {
    fn expectation(&self, path: &PerturbationPath, tau: f64) -> Result<f64> {
        let o = &self.oracle;
        let (mut r1, mut r2, mut mu, mut eta) = (o.r1.clone(), o.r2.clone(), o.mu.clone(), o.eta.clone());
        let mut theta = self.theta;
        match path {
            PerturbationPath::Additive { component, bump } => {
                for i in 0..r1.len() {
                    match component {
                        NuisanceComponent::Eta => {
                            let b = tau * bump.eval(&self.x_rows[i]);
                            eta[i] += b;
                            r1[i] += b;
                        }
                        NuisanceComponent::FirstStage => {
                            let b = tau * bump.eval(&self.x_rows[i]);
                            r2[i] += b;
                            mu[i] += b;
                            r1[i] += self.theta * b;
                        }
                        NuisanceComponent::LongRegression => {
                            mu[i] += tau * bump.eval(&self.w_rows[i]);
                        }
                        _ => return Err(unsupported(path, "the partly linear model")),
                    }
                }
            }
            PerturbationPath::Parameter { delta } => theta += tau * delta[0],
            _ => return Err(unsupported(path, "the partly linear model")),
        }
        let (y1, y2, z) = (self.data.y1()?, self.data.y2()?, self.data.column("z2")?);
        let terms = (0..y1.len()).map(|i| {
            let g = match self.kind {
                PlmMomentKind::Orthogonal => (y1[i] - r1[i] - theta * (y2[i] - r2[i])) * (mu[i] - r2[i]),
                PlmMomentKind::PlugIn => (y1[i] - theta * y2[i] - eta[i]) * z[i],
            };
            self.weights[i] * g
        });
        Ok(linalg::neumaier_sum(terms))
    }

    fn scale(&self) -> f64 {
        self.scale
    }
}

// ---- interacted model ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HteMomentKind {
    /// `(Y1 - gamma'Q_l - eta Y2 X_l~) phi`
    Orthogonal,
    /// Same with `xi_l` in place of `Q_l` in the residual.
    XiResidual,
}

/// Moment expectations for the interacted model on a conditional sample.
/// The projection coefficients of `zeta` on `xi_l` are held at their
/// unperturbed values.
pub struct HteMoment {
    pub kind: HteMomentKind,
    pub l: usize,
    pub null: f64,
    data: Dataset,
    gamma: Vec<f64>,
    eta03: Vec<f64>,
    propensity: Vec<f64>,
    kappa: DVector<f64>,
    w_rows: Vec<Vec<f64>>,
    scale: f64,
}

impl HteMoment {
    pub fn new(dgp: &HteDgp, kind: HteMomentKind, l: usize, draws: usize, seed: u64) -> Result<Self> {
        if l >= dgp.d {
            return Err(Error::IndexOutOfRange(format!("covariate index {l} with {} controls", dgp.d)));
        }
        let data = dgp.conditional_sample(draws, seed)?;
        let propensity = data.y2()?.to_vec();
        let eta03 = dgp.eta03.clone();
        let xi = build_xi_from(&data, &propensity, l, &eta03)?;
        let zeta = zeta(&data, &propensity, l, &eta03)?;
        let kappa = linalg::lstsq(&xi, &DVector::from_column_slice(&zeta))?;
        let phi = &DVector::from_column_slice(&zeta) - &xi * &kappa;
        let w = data.w_matrix()?;
        let w_rows = w.row_iter().map(|r| r.iter().copied().collect()).collect();
        Ok(HteMoment {
            kind,
            l,
            null: dgp.eta04[l],
            gamma: dgp.step_two_coefficients(l),
            eta03,
            propensity,
            kappa,
            w_rows,
            scale: linalg::rms(phi.as_slice()),
            data,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_rows[0].len()
    }

    pub fn n_coefficients(&self) -> usize {
        self.gamma.len()
    }

    pub fn n_controls(&self) -> usize {
        self.eta03.len()
    }
}

fn zeta(data: &Dataset, p: &[f64], l: usize, eta03: &[f64]) -> Result<Vec<f64>> {
    let xl = data.x_columns()?[l];
    Ok(xl.iter().zip(p).map(|(x, pi)| (x - eta03[l]) * pi).collect())
}

impl PathFunctional for HteMoment {
    fn expectation(&self, path: &PerturbationPath, tau: f64) -> Result<f64> {
        let mut p = self.propensity.clone();
        let mut gamma = self.gamma.clone();
        let mut eta03 = self.eta03.clone();
        let mut null = self.null;
        match path {
            PerturbationPath::Additive {
                component: NuisanceComponent::Propensity,
                bump,
            } => {
                for (pi, w) in p.iter_mut().zip(&self.w_rows) {
                    *pi += tau * bump.eval(w);
                }
            }
            PerturbationPath::AdditiveVector { component, direction } => {
                let target = match component {
                    NuisanceComponent::StepTwo => &mut gamma,
                    NuisanceComponent::Centering => &mut eta03,
                    _ => return Err(unsupported(path, "the interacted model")),
                };
                if direction.len() != target.len() {
                    return Err(Error::DimensionMismatch {
                        expected: target.len(),
                        found: direction.len(),
                    });
                }
                for (t, d) in target.iter_mut().zip(direction) {
                    *t += tau * d;
                }
            }
            PerturbationPath::Parameter { delta } => null += tau * delta[0],
            _ => return Err(unsupported(path, "the interacted model")),
        }
        let l = self.l;
        let xi = build_xi_from(&self.data, &p, l, &eta03)?;
        let phi = DVector::from_column_slice(&zeta(&self.data, &p, l, &eta03)?) - &xi * &self.kappa;
        let regressors = match self.kind {
            HteMomentKind::Orthogonal => build_ql(&self.data, l, &eta03)?,
            HteMomentKind::XiResidual => xi,
        };
        let fitted = &regressors * DVector::from_column_slice(&gamma);
        let y1 = self.data.y1()?;
        let y2xl = zeta(&self.data, self.data.y2()?, l, &eta03)?;
        let n = y1.len() as f64;
        Ok(linalg::neumaier_sum((0..y1.len()).map(|i| (y1[i] - fitted[i] - null * y2xl[i]) * phi[i])) / n)
    }

    fn scale(&self) -> f64 {
        self.scale
    }
}

// ---- discrete mixtures ------------------------------------------------------------

/// Exact expectation of a stacked moment under a discrete mixture model.
pub struct MixtureMoment {
    pub model: DiscreteMixtureModel,
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
    pub g: Vec<f64>,
}

impl MixtureMoment {
    pub fn new(model: DiscreteMixtureModel, theta: Vec<f64>, eta: Option<Vec<f64>>, g: Vec<f64>) -> Result<Self> {
        let eta = model.resolve_weights(eta.as_deref())?.to_vec();
        Ok(MixtureMoment { model, theta, eta, g })
    }
}

/// `eta (1 + tau b)`, checked to be a valid density.
pub fn perturb_density(eta: &[f64], b: &[f64], tau: f64) -> Result<Vec<f64>> {
    if b.len() != eta.len() {
        return Err(Error::DimensionMismatch {
            expected: eta.len(),
            found: b.len(),
        });
    }
    let top = b.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if linalg::dot(eta, b).abs() > 1e-12 * top.max(1.0) {
        return Err(Error::PathInfeasible("direction is not mean-zero under eta".into()));
    }
    let out: Vec<f64> = eta.iter().zip(b).map(|(e, bi)| e * (1.0 + tau * bi)).collect();
    if out.iter().any(|v| *v < 0.0) {
        return Err(Error::PathInfeasible(format!("step {tau} leaves the simplex")));
    }
    let s: f64 = out.iter().sum();
    Ok(out.iter().map(|v| v / s).collect())
}

impl PathFunctional for MixtureMoment {
    fn expectation(&self, path: &PerturbationPath, tau: f64) -> Result<f64> {
        match path {
            PerturbationPath::MultiplicativeDensity { direction } => {
                let eta = perturb_density(&self.eta, direction, tau)?;
                self.model.expectation(&self.theta, &eta, &self.g)
            }
            PerturbationPath::Parameter { delta } => {
                if delta.len() != self.theta.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.theta.len(),
                        found: delta.len(),
                    });
                }
                let theta: Vec<f64> = self.theta.iter().zip(delta).map(|(t, d)| t + tau * d).collect();
                self.model.expectation(&theta, &self.eta, &self.g)
            }
            _ => Err(unsupported(path, "a discrete mixture")),
        }
    }

    fn scale(&self) -> f64 {
        let p = self.model.outcome_probabilities(&self.theta, &self.eta).unwrap_or_default();
        p.iter().zip(&self.g).map(|(pi, g)| pi * g * g).sum::<f64>().sqrt()
    }
}

// ---- local alternatives -------------------------------------------------------------

/// A data-generating process indexed by a local drift `delta / sqrt(n)`.
pub trait LocalAlternative: Sync {
    /// Per-observation moment values from a sample of size `n` drawn at
    /// drift `delta`.
    fn moment_sample(&self, delta: f64, n: usize, seed: u64) -> Result<Vec<f64>>;
    /// Limit of `E[sqrt(n) mean(g)]`.
    fn predicted_drift(&self, delta: f64) -> f64;
    /// `E[g^2]` at the truth.
    fn predicted_variance(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub delta: f64,
    pub n: usize,
    pub replications: usize,
    /// Mean over replications of `sqrt(n) mean(g)`.
    pub empirical_drift: f64,
    pub empirical_sd: f64,
    /// `empirical_sd / sqrt(R)`.
    pub mc_se: f64,
    pub predicted_drift: f64,
    /// Mean over replications of the sample variance of `g`.
    pub empirical_variance: f64,
    pub predicted_variance: f64,
    /// `|empirical - predicted| <= 3 mc_se`.
    pub within_tolerance: bool,
}

pub fn drift_check(
    sim: &dyn LocalAlternative,
    delta: f64,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<DriftReport> {
    if replications < 500 {
        return Err(Error::BadSpec(format!("drift checks need R >= 500, got {replications}")));
    }
    let draws: Vec<(f64, f64)> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let g = sim.moment_sample(delta, n, replication_seed(seed, r as u64))?;
            let m = linalg::mean(&g);
            let v = g.iter().map(|x| x * x).sum::<f64>() / g.len() as f64;
            Ok(((n as f64).sqrt() * m, v))
        })
        .collect::<Result<_>>()?;
    let stats: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let vars: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let empirical_drift = linalg::mean(&stats);
    let empirical_sd = linalg::sd(&stats);
    let mc_se = empirical_sd / (replications as f64).sqrt();
    let predicted_drift = sim.predicted_drift(delta);
    Ok(DriftReport {
        delta,
        n,
        replications,
        empirical_drift,
        empirical_sd,
        mc_se,
        predicted_drift,
        empirical_variance: linalg::mean(&vars),
        predicted_variance: sim.predicted_variance(),
        within_tolerance: (empirical_drift - predicted_drift).abs() <= 3.0 * mc_se,
    })
}

/// Partly linear model at `theta0 + delta / sqrt(n)` with the oracle
/// orthogonal moment `(Y1 - theta0 Y2 - eta0(X)) zeta*` evaluated at `theta0`.
pub struct PlmLocal {
    pub dgp: PlmDgp,
    zeta_sq: f64,
}

impl PlmLocal {
    /// `E[zeta*^2]` is computed on a conditional sample of `draws` rows.
    pub fn new(dgp: PlmDgp, draws: usize, seed: u64) -> Result<Self> {
        let m = PlmMoment::new(&dgp, PlmMomentKind::Orthogonal, draws, seed)?;
        Ok(PlmLocal {
            zeta_sq: m.instrument_second_moment(),
            dgp,
        })
    }

    pub fn instrument_second_moment(&self) -> f64 {
        self.zeta_sq
    }
}

impl LocalAlternative for PlmLocal {
    fn moment_sample(&self, delta: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
        let shifted = PlmDgp {
            theta0: self.dgp.theta0 + delta / (n as f64).sqrt(),
            ..self.dgp.clone()
        };
        let data = DgpSpec::new(Family::Plm(shifted), n, seed).generate()?;
        let o = self.dgp.oracle(&data)?;
        let (y1, y2) = (data.y1()?, data.y2()?);
        Ok((0..n)
            .map(|i| (y1[i] - self.dgp.theta0 * y2[i] - o.eta[i]) * (o.mu[i] - o.r2[i]))
            .collect())
    }

    fn predicted_drift(&self, delta: f64) -> f64 {
        delta * self.zeta_sq
    }

    fn predicted_variance(&self) -> f64 {
        self.dgp.sigma_eps.powi(2) * self.zeta_sq
    }
}

/// Discrete mixture drawn at `(theta0 + delta d_theta / sqrt(n),
/// eta0 (1 + delta b / sqrt(n)))` with a fixed stacked moment `g`.
pub struct MixtureLocal {
    pub model: DiscreteMixtureModel,
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
    pub g: Vec<f64>,
    pub theta_direction: Vec<f64>,
    pub density_direction: Vec<f64>,
}

impl LocalAlternative for MixtureLocal {
    fn moment_sample(&self, delta: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
        let s = delta / (n as f64).sqrt();
        let theta: Vec<f64> = self
            .theta
            .iter()
            .zip(&self.theta_direction)
            .map(|(t, d)| t + s * d)
            .collect();
        let eta = perturb_density(&self.eta, &self.density_direction, s)?;
        let p = self.model.outcome_probabilities(&theta, &eta)?;
        let dist = WeightedIndex::new(p.iter().map(|v| v.max(0.0)))
            .map_err(|e| Error::NonStochastic(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.g[dist.sample(&mut rng)]).collect())
    }

    fn predicted_drift(&self, delta: f64) -> f64 {
        let cov = self
            .model
            .score_covariance(&self.theta, &self.eta, &self.g)
            .unwrap_or_default();
        let cond = self
            .model
            .conditional_expectation(&self.theta, &self.g)
            .unwrap_or_default();
        let density: f64 = (0..self.eta.len().min(cond.len()))
            .map(|k| self.eta[k] * self.density_direction[k] * cond[k])
            .sum();
        delta * (linalg::dot(&cov, &self.theta_direction) + density)
    }

    fn predicted_variance(&self) -> f64 {
        let p = self.model.outcome_probabilities(&self.theta, &self.eta).unwrap_or_default();
        let m: f64 = linalg::dot(&p, &self.g);
        p.iter().zip(&self.g).map(|(pi, g)| pi * g * g).sum::<f64>() - m * m
    }
}

// ---- score projection ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreProjection {
    /// `m - S beta`
    pub values: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Residual of the (weighted) least-squares projection of `m` on the score
/// columns: `beta = (S'WS)^{-1} S'W m`.
pub fn project_out_scores(m: &[f64], scores: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<ScoreProjection> {
    let (n, k) = scores.shape();
    if m.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: m.len(),
        });
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: w.len(),
            })
        }
        Some(w) => w.to_vec(),
        None => vec![1.0 / n as f64; n],
    };
    let sw = DMatrix::from_fn(n, k, |i, j| scores[(i, j)] * w[i]);
    let gram = sw.transpose() * scores;
    let rhs = sw.transpose() * DVector::from_column_slice(m);
    let beta = linalg::solve_square(&gram, &rhs, crate::funcdiff::MAX_COND).ok_or_else(|| {
        Error::SingularScoreMatrix(format!(
            "condition number {:.3e}",
            linalg::condition_number(&gram)
        ))
    })?;
    let fitted = scores * &beta;
    Ok(ScoreProjection {
        values: (0..n).map(|i| m[i] - fitted[i]).collect(),
        beta: beta.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LogitPanelDgp;
    use crate::funcdiff::{nf_basis, relevance_constant, RieszSpec};

    #[test]
    fn invalid_step() {
        let m = PlmMoment::new(&PlmDgp::default(), PlmMomentKind::Orthogonal, 100, 1).unwrap();
        let p = PerturbationPath::Parameter { delta: vec![1.0] };
        assert!(matches!(gateaux_derivative(&m, &p, 0.0), Err(Error::InvalidStep(_))));
        assert!(matches!(gateaux_derivative(&m, &p, -1.0), Err(Error::InvalidStep(_))));
    }

    #[test]
    fn orthogonal_plm_moment_ignores_every_nuisance() {
        let dgp = PlmDgp::default();
        let m = PlmMoment::new(&dgp, PlmMomentKind::Orthogonal, 5000, 2).unwrap();
        let mut paths = Vec::new();
        for (c, dim) in [
            (NuisanceComponent::Eta, 5),
            (NuisanceComponent::FirstStage, 5),
            (NuisanceComponent::LongRegression, 6),
        ] {
            for b in random_bumps(dim, 5, 0.5, 3) {
                paths.push(PerturbationPath::Additive { component: c, bump: b });
            }
        }
        let r = verify_orthogonality(&m, &paths, DEFAULT_STEP, 1e-10).unwrap();
        assert!(r.pass, "{}", r.max_abs);
    }

    #[test]
    fn power_slope_is_minus_instrument_variance() {
        let m = PlmMoment::new(&PlmDgp::default(), PlmMomentKind::Orthogonal, 20_000, 4).unwrap();
        let s = power_slope(&m, &[2.0], DEFAULT_STEP).unwrap();
        let e = m.instrument_second_moment();
        assert!((s + 2.0 * e).abs() < 1e-8 * e);
        assert_eq!(power_slope(&m, &[0.0], DEFAULT_STEP).unwrap(), 0.0);
    }

    #[test]
    fn scaling_the_moment_scales_derivatives() {
        let model = LogitPanelDgp::default().model().unwrap();
        let g = nf_basis(&model, &[0.5]).unwrap()[0].values.clone();
        let a = MixtureMoment::new(model.clone(), vec![0.5], None, g.clone()).unwrap();
        let b = MixtureMoment::new(model, vec![0.5], None, g.iter().map(|v| 3.0 * v).collect()).unwrap();
        let p = PerturbationPath::Parameter { delta: vec![1.0] };
        let da = gateaux_derivative(&a, &p, 1e-3).unwrap().richardson;
        let db = gateaux_derivative(&b, &p, 1e-3).unwrap().richardson;
        assert!((db - 3.0 * da).abs() < 1e-9 * da.abs().max(1.0));
        assert!((b.scale() - 3.0 * a.scale()).abs() < 1e-12);
    }

    #[test]
    fn nf_moment_has_zero_density_derivative() {
        let model = LogitPanelDgp::default().model().unwrap();
        let eta = model.weights().unwrap().to_vec();
        for g in nf_basis(&model, &[0.5]).unwrap() {
            let m = MixtureMoment::new(model.clone(), vec![0.5], None, g.values).unwrap();
            let paths: Vec<_> = random_density_directions(&eta, 20, 5)
                .into_iter()
                .map(|d| PerturbationPath::MultiplicativeDensity { direction: d })
                .collect();
            let r = verify_orthogonality(&m, &paths, 1e-3, 1e-10).unwrap();
            assert!(r.pass, "{}", r.max_abs);
        }
    }

    #[test]
    fn infeasible_density_paths() {
        let eta = [0.5, 0.5];
        assert!(matches!(perturb_density(&eta, &[1.0, 0.0], 0.1), Err(Error::PathInfeasible(_))));
        assert!(matches!(perturb_density(&eta, &[1.0, -1.0], 2.0), Err(Error::PathInfeasible(_))));
        let ok = perturb_density(&eta, &[1.0, -1.0], 0.5).unwrap();
        assert!((ok[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn projection_removes_score_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 500;
        let s = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let m: Vec<f64> = (0..n).map(|i| s[(i, 0)] * s[(i, 1)] + 0.3 * s[(i, 0)]).collect();
        let r = project_out_scores(&m, &s, None).unwrap();
        for j in 0..2 {
            let c: Vec<f64> = s.column(j).iter().copied().collect();
            assert!(linalg::dot(&c, &r.values).abs() / n as f64 <= 1e-10 * linalg::rms(&m) * linalg::rms(&c));
        }
        let col: Vec<f64> = s.column(1).iter().copied().collect();
        let zero = project_out_scores(&col, &s, None).unwrap();
        assert!(zero.values.iter().all(|v| v.abs() < 1e-12));
        let dup = DMatrix::from_fn(n, 2, |i, _| s[(i, 0)]);
        assert!(matches!(project_out_scores(&m, &dup, None), Err(Error::SingularScoreMatrix(_))));
    }

    #[test]
    fn gaussian_location_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m: Vec<f64> = z.iter().map(|v| v * v).collect();
        let s = DMatrix::from_column_slice(n, 1, &z);
        let r = project_out_scores(&m, &s, None).unwrap();
        // oracle: E[z^3]/E[z^2] from the same draws
        let beta = z.iter().map(|v| v.powi(3)).sum::<f64>() / z.iter().map(|v| v * v).sum::<f64>();
        assert!((r.beta[0] - beta).abs() < 1e-10);
        assert!(beta.abs() < 0.02);
    }

    #[test]
    fn hte_moment_orthogonal_but_xi_residual_is_not() {
        let dgp = HteDgp::default();
        let orth = HteMoment::new(&dgp, HteMomentKind::Orthogonal, 0, 4000, 8).unwrap();
        let bad = HteMoment::new(&dgp, HteMomentKind::XiResidual, 0, 4000, 8).unwrap();
        let paths: Vec<_> = random_bumps(orth.feature_dim(), 5, 0.5, 9)
            .into_iter()
            .map(|b| PerturbationPath::Additive {
                component: NuisanceComponent::Propensity,
                bump: b,
            })
            .collect();
        let tol = 1e-3 * 0.5 * orth.scale();
        assert!(verify_orthogonality(&orth, &paths, DEFAULT_STEP, tol).unwrap().pass);
        let r = verify_orthogonality(&bad, &paths, DEFAULT_STEP, tol).unwrap();
        assert!(!r.pass && r.max_abs > 1e-2 * bad.scale());
        let mut vpaths = Vec::new();
        for (c, k) in [
            (NuisanceComponent::StepTwo, orth.n_coefficients()),
            (NuisanceComponent::Centering, orth.n_controls()),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            for _ in 0..3 {
                vpaths.push(PerturbationPath::AdditiveVector {
                    component: c,
                    direction: (0..k).map(|_| StandardNormal.sample(&mut rng)).collect(),
                });
            }
        }
        let r = verify_orthogonality(&orth, &vpaths, DEFAULT_STEP, 1e-8 * orth.scale()).unwrap();
        assert!(r.pass, "{}", r.max_abs);
    }

    #[test]
    fn zero_information_moment_has_no_drift() {
        let lp = LogitPanelDgp {
            cells: vec![[0.0, 1.0], [0.0, 2.0]],
            cell_weights: vec![0.5, 0.5],
            ..LogitPanelDgp::default()
        };
        let model = lp.model().unwrap();
        let theta = vec![lp.theta0];
        let eta = lp.alpha_weights.clone();
        let basis = nf_basis(&model, &theta).unwrap();
        assert!(basis.len() >= 2);
        let c0 = model.score_covariance(&theta, &eta, &basis[0].values).unwrap()[0];
        let c1 = model.score_covariance(&theta, &eta, &basis[1].values).unwrap()[0];
        let g: Vec<f64> = (0..basis[0].values.len())
            .map(|i| c1 * basis[0].values[i] - c0 * basis[1].values[i])
            .collect();
        let gv = crate::funcdiff::MomentVector {
            values: g.clone(),
            ..basis[0].clone()
        };
        let c = relevance_constant(&model, &theta, &eta, &gv, &RieszSpec::mean_alpha(&model)).unwrap();
        assert!(c.abs() < 1e-10);
        let sim = MixtureLocal {
            model,
            theta,
            eta: eta.clone(),
            g,
            theta_direction: vec![1.0],
            density_direction: random_density_directions(&eta, 1, 11)[0].clone(),
        };
        assert!(sim.predicted_drift(2.0).abs() < 1e-12);
        let r = drift_check(&sim, 2.0, 500, 500, 12).unwrap();
        assert!(r.within_tolerance, "{r:?}");
    }

    #[test]
    fn drift_needs_enough_replications() {
        let sim = PlmLocal::new(PlmDgp::default(), 1000, 1).unwrap();
        assert!(matches!(drift_check(&sim, 1.0, 100, 10, 0), Err(Error::BadSpec(_))));
    }
}
