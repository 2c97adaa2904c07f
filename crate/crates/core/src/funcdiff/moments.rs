//! Nuisance-free, partially robust and fully robust moments on a discrete
//! outcome support, plus the general Riesz-representer construction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::DiscreteMixtureModel;
use crate::error::{Error, Result};
use crate::linalg::{self, NULL_TOL};

/// Relative tolerance for range checks of `E[g | alpha] = r - psi`.
pub const SOLVE_TOL: f64 = 1e-6;
/// Condition-number ceiling for Jacobians.
pub const MAX_COND: f64 = 1e10;
/// Residual tolerance of the column-space step of the general algorithm.
pub const COLUMN_SPACE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentKind {
    /// `E[g | alpha] = 0` for every grid point and cell.
    Nf,
    /// `E[g | alpha] = r(alpha) - psi`.
    Partial,
    /// Partial and additionally insensitive to `theta`.
    FullyRobust,
}

/// A moment on the stacked support `(cell, outcome)`, indexed `c * M + m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub values: Vec<f64>,
    pub n_cells: usize,
    pub n_outcomes: usize,
    pub kind: MomentKind,
    /// Target value `psi = E_eta[r]` when built for a functional.
    pub psi: Option<f64>,
    /// Relevance constant `C` in `E[g | alpha] = C (r - psi)`.
    pub relevance: Option<f64>,
    pub theta: Vec<f64>,
}

impl MomentVector {
    pub fn cell(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_outcomes..(c + 1) * self.n_outcomes]
    }

    pub fn value(&self, cell: usize, outcome: usize) -> f64 {
        self.values[cell * self.n_outcomes + outcome]
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.values)
    }

    /// Multiply by `c`; the relevance constant scales along.
    pub fn scaled(&self, c: f64) -> MomentVector {
        MomentVector {
            values: self.values.iter().map(|v| v * c).collect(),
            relevance: self.relevance.map(|r| r * c),
            ..self.clone()
        }
    }

    fn from_values(model: &DiscreteMixtureModel, values: Vec<f64>, kind: MomentKind, theta: &[f64]) -> Self {
        MomentVector {
            values,
            n_cells: model.n_cells(),
            n_outcomes: model.n_outcomes(),
            kind,
            psi: None,
            relevance: None,
            theta: theta.to_vec(),
        }
    }
}

/// Representer `r(alpha)` of a linear functional `psi = E_eta[r(alpha)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RieszSpec {
    pub r: Vec<f64>,
    #[serde(default)]
    pub description: String,
}

impl RieszSpec {
    pub fn new(r: Vec<f64>, description: impl Into<String>) -> Self {
        RieszSpec {
            r,
            description: description.into(),
        }
    }

    /// `r(alpha) = alpha`, i.e. the mean of the heterogeneity.
    pub fn mean_alpha(model: &DiscreteMixtureModel) -> Self {
        RieszSpec::new(model.grid().to_vec(), "mean of alpha")
    }

    pub fn psi(&self, eta: &[f64]) -> f64 {
        linalg::dot(&self.r, eta)
    }

    pub fn centered(&self, eta: &[f64]) -> Vec<f64> {
        let psi = self.psi(eta);
        self.r.iter().map(|v| v - psi).collect()
    }

    fn check(&self, model: &DiscreteMixtureModel) -> Result<()> {
        if self.r.len() != model.n_grid() {
            return Err(Error::DimensionMismatch {
                expected: model.n_grid(),
                found: self.r.len(),
            });
        }
        Ok(())
    }
}

pub fn conditional_matrix(model: &DiscreteMixtureModel, theta: &[f64], cell: usize) -> Result<DMatrix<f64>> {
    model.conditional_matrix(theta, cell)
}

/// Orthonormal basis of `{g : L(theta)' g = 0}` for one cell, returned as
/// stacked moments that vanish on the other cells. Empty when the
/// conditional matrix has full row rank.
pub fn nf_moments(model: &DiscreteMixtureModel, theta: &[f64], cell: usize) -> Result<Vec<MomentVector>> {
    let l = model.conditional_matrix(theta, cell)?;
    let basis = linalg::nullspace(&l.transpose(), NULL_TOL);
    let m = model.n_outcomes();
    Ok(basis
        .column_iter()
        .map(|col| {
            let mut values = vec![0.0; model.support_len()];
            values[cell * m..(cell + 1) * m].copy_from_slice(col.as_slice());
            MomentVector::from_values(model, values, MomentKind::Nf, theta)
        })
        .collect())
}

/// NF moments of every cell.
pub fn nf_basis(model: &DiscreteMixtureModel, theta: &[f64]) -> Result<Vec<MomentVector>> {
    let mut out = Vec::new();
    for c in 0..model.n_cells() {
        out.extend(nf_moments(model, theta, c)?);
    }
    Ok(out)
}

/// `max_{c, g} |sum_m g(c, z_m) f(z_m | alpha_g, c)|`.
pub fn nf_residual(model: &DiscreteMixtureModel, theta: &[f64], g: &MomentVector) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in 0..model.n_cells() {
        let l = model.conditional_matrix(theta, c)?;
        let r = l.transpose() * DVector::from_column_slice(g.cell(c));
        worst = worst.max(r.amax());
    }
    Ok(worst)
}

/// Minimum-norm `g` with `E[g | alpha] = r(alpha) - psi` on the grid, where
/// `psi = sum eta r`.
pub fn solve_partial_moment(
    model: &DiscreteMixtureModel,
    theta: &[f64],
    r: &RieszSpec,
    eta: &[f64],
) -> Result<MomentVector> {
    r.check(model)?;
    let eta = model.resolve_weights(Some(eta))?;
    let psi = r.psi(eta);
    let target = DVector::from_vec(r.centered(eta));
    let tnorm = target.norm();
    let values = if tnorm == 0.0 {
        vec![0.0; model.support_len()]
    } else {
        let a = model.stacked_adjoint(theta)?;
        let g = linalg::pinv_solve(&a, &target, NULL_TOL);
        let resid = (&a * &g - &target).norm();
        if resid > SOLVE_TOL * tnorm {
            return Err(Error::NotSolvable(format!(
                "r - psi is outside the range of the adjoint (residual {resid:.3e}, norm {tnorm:.3e})"
            )));
        }
        g.iter().copied().collect()
    };
    let mut out = MomentVector::from_values(model, values, MomentKind::Partial, theta);
    out.psi = Some(psi);
    out.relevance = Some(if tnorm == 0.0 { 0.0 } else { 1.0 });
    Ok(out)
}

/// `E[d g / d theta_j]` for a moment that depends on `theta` only through
/// its construction at the truth. Because `E_theta[g(theta)] = 0` for every
/// `theta`, this equals `-E[g s_theta_j]`.
pub fn expected_jacobian(
    model: &DiscreteMixtureModel,
    theta: &[f64],
    eta: &[f64],
    g: &MomentVector,
) -> Result<Vec<f64>> {
    Ok(model
        .score_covariance(theta, eta, &g.values)?
        .into_iter()
        .map(|v| -v)
        .collect())
}

/// `g = g_partial - E[d g_partial / d theta'] E[d m / d theta']^{-1} m` with
/// `m` a set of `p` NF moments. Expectations use exact model probabilities.
pub fn fully_robust_moment(
    model: &DiscreteMixtureModel,
    theta: &[f64],
    eta: &[f64],
    partial: &MomentVector,
    nf: &[MomentVector],
) -> Result<MomentVector> {
    let p = model.n_params();
    if nf.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: nf.len(),
        });
    }
    let eta = model.resolve_weights(Some(eta))?;
    model.check_moment_len(&partial.values)?;
    let d = DVector::from_vec(expected_jacobian(model, theta, eta, partial)?);
    // jac[(k, j)] = E[d m_k / d theta_j]
    let mut jac = DMatrix::zeros(p, p);
    for (k, m) in nf.iter().enumerate() {
        model.check_moment_len(&m.values)?;
        for (j, v) in expected_jacobian(model, theta, eta, m)?.into_iter().enumerate() {
            jac[(k, j)] = v;
        }
    }
    let values = if p == 0 || d.amax() == 0.0 {
        partial.values.clone()
    } else {
        let cond = linalg::condition_number(&jac);
        let a = if cond > MAX_COND {
            None
        } else {
            linalg::solve_square(&jac.transpose(), &d, MAX_COND)
        }
        .ok_or_else(|| {
            Error::SingularJacobian(format!("condition number {cond:.3e} of E[dm/dtheta']"))
        })?;
        let mut g = partial.values.clone();
        for (k, m) in nf.iter().enumerate() {
            for (gi, mi) in g.iter_mut().zip(&m.values) {
                *gi -= a[k] * mi;
            }
        }
        g
    };
    let mut out = MomentVector::from_values(model, values, MomentKind::FullyRobust, theta);
    out.psi = partial.psi;
    out.relevance = partial.relevance;
    Ok(out)
}

/// The coefficient `C` in `E[g | alpha] = C (r - psi)`, estimated by
/// `eta`-weighted least squares over the grid.
pub fn relevance_constant(
    model: &DiscreteMixtureModel,
    theta: &[f64],
    eta: &[f64],
    g: &MomentVector,
    r: &RieszSpec,
) -> Result<f64> {
    r.check(model)?;
    let eta = model.resolve_weights(Some(eta))?;
    let centered = r.centered(eta);
    let denom: f64 = centered.iter().zip(eta).map(|(c, w)| w * c * c).sum();
    let rscale = centered.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    if rscale == 0.0 || denom <= 1e-300 {
        return Err(Error::DegenerateFunctional(
            "r is constant on the support of eta".into(),
        ));
    }
    let cond = model.conditional_expectation(theta, &g.values)?;
    let c = cond
        .iter()
        .zip(&centered)
        .zip(eta)
        .map(|((e, r), w)| w * e * r)
        .sum::<f64>()
        / denom;
    let resid = cond
        .iter()
        .zip(&centered)
        .map(|(e, r)| (e - c * r).abs())
        .fold(0.0, f64::max);
    let scale = rscale.max(cond.iter().fold(0.0f64, |a, e| a.max(e.abs())));
    if resid > SOLVE_TOL * scale {
        return Err(Error::NotProportional(format!(
            "E[g | alpha] - C (r - psi) reaches {resid:.3e} on the grid"
        )));
    }
    Ok(c)
}

/// The Riesz representer of a target: a loading `r1` on the structural
/// parameters and optionally a functional of the heterogeneity distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Riesz {
    pub r1: Vec<f64>,
    pub r2: Option<RieszSpec>,
}

/// Output of [`general_algorithm`] with the adjoint-condition checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralMoment {
    pub moment: MomentVector,
    /// Loadings `A` on the NF basis.
    pub loadings: Vec<f64>,
    /// `E[g s_theta]`, which must equal `r1`.
    pub theta_adjoint: Vec<f64>,
    /// `max |E[g | alpha] - (r2 - psi)|` over the grid.
    pub eta_adjoint_residual: f64,
}

/// Orthogonal moment for `(r1, r2)`:
/// solve `E[g~ | alpha] = r2 - psi`, then choose NF loadings `A` with
/// `E[d m / d theta] A = r1 + E[d g~ / d theta]` and return `g = g~ - A'm`.
pub fn general_algorithm(
    model: &DiscreteMixtureModel,
    theta: &[f64],
    eta: &[f64],
    riesz: &Riesz,
) -> Result<GeneralMoment> {
    let p = model.n_params();
    if riesz.r1.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: riesz.r1.len(),
        });
    }
    let eta = model.resolve_weights(Some(eta))?;
    let partial = match &riesz.r2 {
        Some(r) => solve_partial_moment(model, theta, r, eta)?,
        None => {
            let mut z = MomentVector::from_values(
                model,
                vec![0.0; model.support_len()],
                MomentKind::Partial,
                theta,
            );
            z.relevance = Some(0.0);
            z
        }
    };
    let basis = nf_basis(model, theta)?;
    let mut target = DVector::from_vec(riesz.r1.clone());
    let d = expected_jacobian(model, theta, eta, &partial)?;
    for j in 0..p {
        target[j] += d[j];
    }
    let mut jac = DMatrix::zeros(p, basis.len());
    for (k, m) in basis.iter().enumerate() {
        for (j, v) in expected_jacobian(model, theta, eta, m)?.into_iter().enumerate() {
            jac[(j, k)] = v;
        }
    }
    let loadings = if target.amax() == 0.0 || basis.is_empty() {
        DVector::zeros(basis.len())
    } else {
        linalg::pinv_solve(&jac, &target, NULL_TOL)
    };
    let resid = if basis.is_empty() {
        target.norm()
    } else {
        (&jac * &loadings - &target).norm()
    };
    if resid > COLUMN_SPACE_TOL * target.norm().max(1.0) {
        return Err(Error::ColumnSpaceFailure(format!(
            "r1 + E[dg~/dtheta] is not in the column space of the NF Jacobian (residual {resid:.3e})"
        )));
    }
    let mut values = partial.values.clone();
    for (k, m) in basis.iter().enumerate() {
        for (gi, mi) in values.iter_mut().zip(&m.values) {
            *gi -= loadings[k] * mi;
        }
    }
    let kind = if riesz.r2.is_some() {
        MomentKind::FullyRobust
    } else {
        MomentKind::Nf
    };
    let mut moment = MomentVector::from_values(model, values, kind, theta);
    moment.psi = partial.psi;
    moment.relevance = partial.relevance;

    let theta_adjoint = model.score_covariance(theta, eta, &moment.values)?;
    let adj_err = theta_adjoint
        .iter()
        .zip(&riesz.r1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cond = model.conditional_expectation(theta, &moment.values)?;
    let centered = match &riesz.r2 {
        Some(r) => r.centered(eta),
        None => vec![0.0; model.n_grid()],
    };
    let eta_adjoint_residual = cond
        .iter()
        .zip(&centered)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = centered.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    if adj_err > 1e-6 * linalg::norm(&riesz.r1).max(1.0) || eta_adjoint_residual > SOLVE_TOL * scale {
        return Err(Error::NotProportional(format!(
            "adjoint conditions fail (theta: {adj_err:.3e}, eta: {eta_adjoint_residual:.3e})"
        )));
    }
    Ok(GeneralMoment {
        moment,
        loadings: loadings.iter().copied().collect(),
        theta_adjoint,
        eta_adjoint_residual,
    })
}

/// Central-difference derivative of `theta -> E_{theta, eta}[g]` with `g`
/// held fixed.
pub fn theta_sensitivity(
    model: &DiscreteMixtureModel,
    theta: &[f64],
    eta: &[f64],
    g: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidStep(format!("step {h} must be positive")));
    }
    (0..theta.len())
        .map(|j| {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += h;
            tm[j] -= h;
            Ok((model.expectation(&tp, eta, g)? - model.expectation(&tm, eta, g)?) / (2.0 * h))
        })
        .collect()
}

/// A moment of the requested kind: the first NF basis element, the
/// minimum-norm partial moment for `r`, or its fully robust version built
/// from the first `p` NF basis elements.
pub fn build_moment(
    model: &DiscreteMixtureModel,
    theta: &[f64],
    eta: &[f64],
    kind: MomentKind,
    r: Option<&RieszSpec>,
) -> Result<MomentVector> {
    let need_r = || r.ok_or_else(|| Error::BadSpec(format!("{kind:?} moments need a functional")));
    match kind {
        MomentKind::Nf => nf_basis(model, theta)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::NotSolvable("no nuisance-free moment exists".into())),
        MomentKind::Partial => solve_partial_moment(model, theta, need_r()?, eta),
        MomentKind::FullyRobust => {
            let partial = solve_partial_moment(model, theta, need_r()?, eta)?;
            let nf: Vec<MomentVector> = nf_basis(model, theta)?.into_iter().take(model.n_params()).collect();
            fully_robust_moment(model, theta, eta, &partial, &nf)
        }
    }
}
