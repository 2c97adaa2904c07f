//! Coordinate descent for the l1-penalized least-squares problem
//! `(1/2n)||y - b0 - X b||^2 + lambda ||b||_1` on unstandardized features.

use nalgebra::{DMatrix, DVector};

use super::crossfit::CrossFitPlan;
use super::center;
use crate::error::Result;
use crate::linalg;

const MAX_SWEEPS: usize = 10_000;
const TOL: f64 = 1e-8;
const CV_GRID: usize = 20;

/// Objective values after each sweep of a coordinate-descent run.
#[derive(Debug, Clone)]
pub struct LassoTrace {
    pub intercept: f64,
    pub coef: DVector<f64>,
    pub objectives: Vec<f64>,
    pub sweeps: usize,
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Smallest penalty that sets every slope to zero: `max_j |x_j'(y - ybar)| / n`.
pub fn lambda_max(x: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = x.nrows() as f64;
    let ym = linalg::mean(y);
    x.column_iter()
        .map(|c| {
            let cm = linalg::mean(c.as_slice());
            c.iter().zip(y).map(|(a, b)| (a - cm) * (b - ym)).sum::<f64>().abs() / n
        })
        .fold(0.0, f64::max)
}

pub fn lasso_objective(x: &DMatrix<f64>, y: &[f64], intercept: f64, coef: &DVector<f64>, lambda: f64) -> f64 {
    let n = x.nrows() as f64;
    let fitted = x * coef;
    let rss: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(yi, fi)| (yi - intercept - fi).powi(2))
        .sum();
    rss / (2.0 * n) + lambda * coef.iter().map(|b| b.abs()).sum::<f64>()
}

/// Run coordinate descent, recording the objective after every sweep.
pub(crate) fn run(x: &DMatrix<f64>, y: &[f64], lambda: f64, warm: Option<&DVector<f64>>) -> LassoTrace {
    let (n, d) = x.shape();
    let nf = n as f64;
    let (xm, xc) = center(x);
    let ym = linalg::mean(y);
    let mut beta = warm.cloned().unwrap_or_else(|| DVector::zeros(d));
    let scale: Vec<f64> = xc.column_iter().map(|c| c.norm_squared() / nf).collect();
    let mut resid: Vec<f64> = {
        let fit = &xc * &beta;
        (0..n).map(|i| y[i] - ym - fit[i]).collect()
    };
    let objective = |beta: &DVector<f64>, resid: &[f64]| {
        resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * nf)
            + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut objectives = vec![objective(&beta, &resid)];
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            let old = beta[j];
            let new = if scale[j] > 0.0 {
                let col = xc.column(j);
                let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + scale[j] * old;
                soft_threshold(rho, lambda) / scale[j]
            } else {
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(xc.column(j).iter()) {
                    *r -= a * delta;
                }
                beta[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        objectives.push(objective(&beta, &resid));
        if max_change < TOL {
            break;
        }
    }
    let intercept = ym - xm.iter().zip(beta.iter()).map(|(m, b)| m * b).sum::<f64>();
    LassoTrace {
        intercept,
        coef: beta,
        objectives,
        sweeps,
    }
}

pub(crate) fn fit_lasso(x: &DMatrix<f64>, y: &[f64], lambda: f64, warm: Option<&DVector<f64>>) -> (f64, DVector<f64>) {
    let t = run(x, y, lambda, warm);
    (t.intercept, t.coef)
}

/// Penalty minimizing the K-fold cross-validated squared error over a
/// log-spaced grid spanning `[1e-4, 1] * lambda_max`.
pub(crate) fn cv_lambda(x: &DMatrix<f64>, y: &[f64], folds: usize, seed: u64) -> Result<f64> {
    let lmax = lambda_max(x, y);
    if lmax == 0.0 || x.ncols() == 0 {
        return Ok(0.0);
    }
    let grid: Vec<f64> = (0..CV_GRID)
        .map(|k| lmax * 10f64.powf(-4.0 * k as f64 / (CV_GRID - 1) as f64))
        .collect();
    let plan = CrossFitPlan::new(x.nrows(), folds, seed)?;
    let mut loss = vec![0.0; grid.len()];
    for f in 0..folds {
        let train = plan.train_rows(f);
        let test = plan.fold_rows(f);
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let xv = x.select_rows(&test);
        let mut warm: Option<DVector<f64>> = None;
        for (k, &lam) in grid.iter().enumerate() {
            let (b0, b) = fit_lasso(&xt, &yt, lam, warm.as_ref());
            let pred = &xv * &b;
            loss[k] += test
                .iter()
                .enumerate()
                .map(|(r, &i)| (y[i] - b0 - pred[r]).powi(2))
                .sum::<f64>();
            warm = Some(b);
        }
    }
    let mut best = 0;
    for k in 1..grid.len() {
        if loss[k] < loss[best] {
            best = k;
        }
    }
    Ok(grid[best])
}
