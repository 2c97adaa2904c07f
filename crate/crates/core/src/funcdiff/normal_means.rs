//! Nuisance-free moments for `Z = alpha + sqrt(theta) u` with `alpha` on a
//! finite support: functions `g` with `int g(z) phi((z - alpha_j)/sqrt(theta)) dz = 0`
//! for every support point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::moments::{MomentKind, MomentVector};
use crate::error::{Error, Result};
use crate::linalg;

/// Required grid coverage beyond the support, in units of `sqrt(theta)`.
pub const COVERAGE_SD: f64 = 8.0;
/// Tolerated relative orthogonality residual.
pub const RESIDUAL_TOL: f64 = 1e-6;
const MAX_REFINEMENTS: usize = 4;

/// `g(z) = ((z - center)/scale)^power - sum_j coef_j phi((z - alpha_j)/sd)`,
/// divided by `norm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMeansMoment {
    pub moment: MomentVector,
    pub grid: Vec<f64>,
    pub support: Vec<f64>,
    pub theta: f64,
    pub center: f64,
    pub scale: f64,
    pub power: i32,
    pub coef: Vec<f64>,
    pub norm: f64,
    /// Largest `|int g phi_j| / (||g|| ||phi_j||)` on the finest grid used.
    pub residual: f64,
}

impl NormalMeansMoment {
    pub fn eval(&self, z: f64) -> f64 {
        raw(z, self.center, self.scale, self.power, &self.support, self.theta.sqrt(), &self.coef) / self.norm
    }
}

fn bump(z: f64, a: f64, sd: f64) -> f64 {
    linalg::normal_pdf((z - a) / sd)
}

fn raw(z: f64, center: f64, scale: f64, power: i32, support: &[f64], sd: f64, coef: &[f64]) -> f64 {
    let p = ((z - center) / scale).powi(power);
    p - support.iter().zip(coef).map(|(a, c)| c * bump(z, *a, sd)).sum::<f64>()
}

fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = grid[k + 1] - grid[k];
        w[k] += h / 2.0;
        w[k + 1] += h / 2.0;
    }
    w
}

fn refine(grid: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * grid.len() - 1);
    for k in 0..grid.len() - 1 {
        out.push(grid[k]);
        out.push(0.5 * (grid[k] + grid[k + 1]));
    }
    out.push(*grid.last().unwrap());
    out
}

struct Fit {
    coef: Vec<f64>,
    norm: f64,
}

/// Project the reference polynomial off the Gaussian bumps in the weighted
/// inner product of `grid`.
fn fit_on(grid: &[f64], support: &[f64], sd: f64, center: f64, scale: f64, power: i32) -> Fit {
    let w = trapezoid_weights(grid);
    let j = support.len();
    let gram = DMatrix::from_fn(j, j, |a, b| {
        grid.iter()
            .zip(&w)
            .map(|(z, wk)| wk * bump(*z, support[a], sd) * bump(*z, support[b], sd))
            .sum()
    });
    let rhs = DVector::from_fn(j, |a, _| {
        grid.iter()
            .zip(&w)
            .map(|(z, wk)| wk * ((z - center) / scale).powi(power) * bump(*z, support[a], sd))
            .sum()
    });
    let coef: Vec<f64> = linalg::pinv_solve(&gram, &rhs, linalg::NULL_TOL).iter().copied().collect();
    let norm = grid
        .iter()
        .zip(&w)
        .map(|(z, wk)| wk * raw(*z, center, scale, power, support, sd, &coef).powi(2))
        .sum::<f64>()
        .sqrt();
    Fit { coef, norm }
}

/// Worst relative residual of `int g phi_j` on `grid`.
fn residual_on(grid: &[f64], support: &[f64], sd: f64, center: f64, scale: f64, power: i32, fit: &Fit) -> f64 {
    let w = trapezoid_weights(grid);
    let bump_norm = (sd / (2.0 * std::f64::consts::PI.sqrt())).sqrt();
    support
        .iter()
        .map(|a| {
            let v: f64 = grid
                .iter()
                .zip(&w)
                .map(|(z, wk)| wk * raw(*z, center, scale, power, support, sd, &fit.coef) * bump(*z, *a, sd))
                .sum();
            v.abs() / (fit.norm * bump_norm)
        })
        .fold(0.0, f64::max)
}

/// One unit-norm nuisance-free moment on `z_grid` (increasing, covering the
/// support by `8 sqrt(theta)` on both sides).
pub fn normal_means_moment(support: &[f64], theta: f64, z_grid: &[f64]) -> Result<NormalMeansMoment> {
    if support.is_empty() {
        return Err(Error::BadSpec("empty support".into()));
    }
    if !(theta > 0.0) {
        return Err(Error::BadSpec(format!("variance {theta} must be positive")));
    }
    if z_grid.len() <= support.len() || z_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::BadSpec(
            "grid must be strictly increasing with more points than the support".into(),
        ));
    }
    let sd = theta.sqrt();
    let lo = support.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = support.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if z_grid[0] > lo - COVERAGE_SD * sd || *z_grid.last().unwrap() < hi + COVERAGE_SD * sd {
        return Err(Error::QuadratureTooCoarse(format!(
            "grid [{}, {}] does not cover the support by {COVERAGE_SD} sd",
            z_grid[0],
            z_grid.last().unwrap()
        )));
    }
    let center = 0.5 * (lo + hi);
    let scale = 0.5 * (hi - lo) + sd;
    let power = support.len() as i32;
    let mut grid = z_grid.to_vec();
    let mut residual = f64::INFINITY;
    for _ in 0..=MAX_REFINEMENTS {
        let fit = fit_on(&grid, support, sd, center, scale, power);
        let fine = refine(&grid);
        residual = residual_on(&fine, support, sd, center, scale, power, &fit);
        if residual <= RESIDUAL_TOL {
            let values: Vec<f64> = z_grid
                .iter()
                .map(|z| raw(*z, center, scale, power, support, sd, &fit.coef) / fit.norm)
                .collect();
            let n = values.len();
            return Ok(NormalMeansMoment {
                moment: MomentVector {
                    values,
                    n_cells: 1,
                    n_outcomes: n,
                    kind: MomentKind::Nf,
                    psi: None,
                    relevance: None,
                    theta: vec![theta],
                },
                grid: z_grid.to_vec(),
                support: support.to_vec(),
                theta,
                center,
                scale,
                power,
                coef: fit.coef,
                norm: fit.norm,
                residual,
            });
        }
        grid = fine;
    }
    Err(Error::QuadratureTooCoarse(format!(
        "orthogonality residual {residual:.3e} after {MAX_REFINEMENTS} refinements"
    )))
}

/// `n` equally spaced points covering `support +- (8 sqrt(theta) + 1)`.
pub fn default_grid(support: &[f64], theta: f64, n: usize) -> Vec<f64> {
    let pad = COVERAGE_SD * theta.sqrt() + 1.0;
    let lo = support.iter().copied().fold(f64::INFINITY, f64::min) - pad;
    let hi = support.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gauss-Hermite nodes and weights for `int f(x) exp(-x^2) dx` via the
    /// Golub-Welsch eigenproblem.
    fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
        let jac = DMatrix::from_fn(m, m, |i, j| {
            if i + 1 == j || j + 1 == i {
                ((i.max(j)) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = jac.symmetric_eigen();
        let nodes = eig.eigenvalues.iter().copied().collect();
        let weights = (0..m)
            .map(|k| std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2))
            .collect();
        (nodes, weights)
    }

    /// `int g(z) phi((z - a)/sd) dz` by Gauss-Hermite.
    fn oracle(g: &NormalMeansMoment, a: f64) -> f64 {
        let (x, w) = gauss_hermite(80);
        let sd = g.theta.sqrt();
        // z = a + sqrt(2) sd x; phi((z-a)/sd) = exp(-x^2)/sqrt(2 pi)
        x.iter()
            .zip(&w)
            .map(|(xi, wi)| wi * g.eval(a + std::f64::consts::SQRT_2 * sd * xi))
            .sum::<f64>()
            * std::f64::consts::SQRT_2
            * sd
            / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn single_point_support() {
        let grid = default_grid(&[0.0], 1.0, 401);
        let g = normal_means_moment(&[0.0], 1.0, &grid).unwrap();
        assert!(oracle(&g, 0.0).abs() < 1e-8);
        assert!(g.residual <= RESIDUAL_TOL);
    }

    #[test]
    fn two_point_support() {
        let s = [-1.0, 1.0];
        let g = normal_means_moment(&s, 1.0, &default_grid(&s, 1.0, 401)).unwrap();
        for a in s {
            assert!(oracle(&g, a).abs() < 1e-8, "{}", oracle(&g, a));
        }
        // not trivially zero: a point outside the support is not annihilated
        assert!(oracle(&g, 3.0).abs() > 1e-3);
    }

    #[test]
    fn duplicated_support_point() {
        let grid = default_grid(&[-1.0, 1.0], 0.5, 401);
        let a = normal_means_moment(&[-1.0, 1.0], 0.5, &grid).unwrap();
        let b = normal_means_moment(&[-1.0, 1.0, 1.0], 0.5, &grid).unwrap();
        for x in [-1.0, 1.0] {
            assert!(oracle(&b, x).abs() < 1e-8);
        }
        assert!(oracle(&a, 1.0).abs() < 1e-8);
    }

    #[test]
    fn narrow_grid_is_too_coarse() {
        let grid: Vec<f64> = (0..50).map(|k| -3.0 + 6.0 * k as f64 / 49.0).collect();
        assert!(matches!(
            normal_means_moment(&[0.0], 1.0, &grid),
            Err(Error::QuadratureTooCoarse(_))
        ));
    }

    #[test]
    fn grid_values_have_unit_norm() {
        let s = [0.0, 2.0];
        let grid = default_grid(&s, 1.0, 801);
        let g = normal_means_moment(&s, 1.0, &grid).unwrap();
        let w = trapezoid_weights(&grid);
        let n2: f64 = g.moment.values.iter().zip(&w).map(|(v, wk)| wk * v * v).sum();
        assert!((n2 - 1.0).abs() < 1e-10);
    }
}
