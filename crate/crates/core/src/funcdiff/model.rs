//! Discrete mixture models `p(z, c) = w_c sum_g eta_g f(z | alpha_g, c; theta)`
//! on a finite outcome support and a finite grid of unobserved heterogeneity.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column sums of a conditional matrix may deviate from one by at most this.
pub const STOCHASTIC_TOL: f64 = 1e-8;

/// A user-supplied conditional pmf `f(z_m | alpha, cell; theta)`.
pub trait ConditionalPmf: Send + Sync {
    fn n_outcomes(&self) -> usize;
    fn n_cells(&self) -> usize;
    fn n_params(&self) -> usize;
    fn pmf(&self, outcome: usize, alpha: f64, cell: usize, theta: &[f64]) -> f64;
    /// Analytic gradient in `theta`; `None` falls back to central differences.
    fn pmf_gradient(&self, _outcome: usize, _alpha: f64, _cell: usize, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn outcome_labels(&self) -> Vec<String> {
        (0..self.n_outcomes()).map(|m| format!("z{m}")).collect()
    }
}

/// Built-in pmf families plus an escape hatch for arbitrary callables.
#[derive(Clone)]
pub enum PmfFamily {
    /// Two-period binary logit, `P(Y_t = 1) = logistic(alpha + theta x_t)`.
    /// Outcomes are ordered `(0,0), (1,0), (0,1), (1,1)`.
    LogitPanelT2 { cells: Vec<[f64; 2]> },
    /// Gaussian location family discretized on `points`:
    /// `f(z_m | alpha; theta) ∝ phi((z_m - alpha) / sqrt(theta))`.
    NormalMeans { points: Vec<f64> },
    /// Explicit probabilities `table[cell][m][g]`, no parameter dependence.
    CustomTable { table: Vec<Vec<Vec<f64>>> },
    Callable(Arc<dyn ConditionalPmf>),
}

impl fmt::Debug for PmfFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PmfFamily::LogitPanelT2 { cells } => {
                f.debug_struct("LogitPanelT2").field("cells", cells).finish()
            }
            PmfFamily::NormalMeans { points } => {
                f.debug_struct("NormalMeans").field("points", points).finish()
            }
            PmfFamily::CustomTable { table } => f
                .debug_struct("CustomTable")
                .field("cells", &table.len())
                .finish(),
            PmfFamily::Callable(_) => f.write_str("Callable"),
        }
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl PmfFamily {
    pub fn n_outcomes(&self) -> usize {
        match self {
            PmfFamily::LogitPanelT2 { .. } => 4,
            PmfFamily::NormalMeans { points } => points.len(),
            PmfFamily::CustomTable { table } => table.first().map(Vec::len).unwrap_or(0),
            PmfFamily::Callable(c) => c.n_outcomes(),
        }
    }

    pub fn n_cells(&self) -> usize {
        match self {
            PmfFamily::LogitPanelT2 { cells } => cells.len(),
            PmfFamily::NormalMeans { .. } => 1,
            PmfFamily::CustomTable { table } => table.len(),
            PmfFamily::Callable(c) => c.n_cells(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            PmfFamily::LogitPanelT2 { .. } | PmfFamily::NormalMeans { .. } => 1,
            PmfFamily::CustomTable { .. } => 0,
            PmfFamily::Callable(c) => c.n_params(),
        }
    }

    pub fn outcome_labels(&self) -> Vec<String> {
        match self {
            PmfFamily::LogitPanelT2 { .. } => ["(0,0)", "(1,0)", "(0,1)", "(1,1)"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            PmfFamily::NormalMeans { points } => points.iter().map(|p| p.to_string()).collect(),
            PmfFamily::CustomTable { .. } => (0..self.n_outcomes()).map(|m| format!("z{m}")).collect(),
            PmfFamily::Callable(c) => c.outcome_labels(),
        }
    }

    /// `f(z_m | alpha, cell; theta)` for a grid cell `g` (the table family
    /// indexes by grid position, the parametric ones by value).
    fn pmf(&self, outcome: usize, alpha: f64, grid_index: usize, cell: usize, theta: &[f64]) -> f64 {
        match self {
            PmfFamily::LogitPanelT2 { cells } => {
                let x = cells[cell];
                let mut p = 1.0;
                for (t, xt) in x.iter().enumerate() {
                    let l = logistic(alpha + theta[0] * xt);
                    p *= if (outcome >> t) & 1 == 1 { l } else { 1.0 - l };
                }
                p
            }
            PmfFamily::NormalMeans { points } => {
                let s = theta[0].sqrt();
                let dens = |z: f64| (-0.5 * ((z - alpha) / s).powi(2)).exp();
                let total: f64 = points.iter().map(|&z| dens(z)).sum();
                dens(points[outcome]) / total
            }
            PmfFamily::CustomTable { table } => table[cell][outcome][grid_index],
            PmfFamily::Callable(c) => c.pmf(outcome, alpha, cell, theta),
        }
    }

    fn pmf_gradient(&self, outcome: usize, alpha: f64, cell: usize, theta: &[f64]) -> Option<Vec<f64>> {
        match self {
            PmfFamily::LogitPanelT2 { cells } => {
                // d log f / d theta = sum_t x_t (y_t - logistic_t)
                let x = cells[cell];
                let mut p = 1.0;
                let mut dlog = 0.0;
                for (t, xt) in x.iter().enumerate() {
                    let l = logistic(alpha + theta[0] * xt);
                    let y = ((outcome >> t) & 1) as f64;
                    p *= if y == 1.0 { l } else { 1.0 - l };
                    dlog += xt * (y - l);
                }
                Some(vec![p * dlog])
            }
            PmfFamily::CustomTable { .. } => Some(vec![]),
            PmfFamily::NormalMeans { .. } => None,
            PmfFamily::Callable(c) => c.pmf_gradient(outcome, alpha, cell, theta),
        }
    }
}

/// Finite mixture over an explicit UH grid.
#[derive(Debug, Clone)]
pub struct DiscreteMixtureModel {
    family: PmfFamily,
    grid: Vec<f64>,
    weights: Option<Vec<f64>>,
    cell_weights: Vec<f64>,
}

impl DiscreteMixtureModel {
    pub fn new(
        family: PmfFamily,
        grid: Vec<f64>,
        weights: Option<Vec<f64>>,
        cell_weights: Vec<f64>,
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::BadSpec("UH grid is empty".into()));
        }
        if family.n_outcomes() == 0 || family.n_cells() == 0 {
            return Err(Error::BadSpec("model needs at least one outcome and one cell".into()));
        }
        if cell_weights.len() != family.n_cells() {
            return Err(Error::BadSpec(format!(
                "{} cell weights for {} cells",
                cell_weights.len(),
                family.n_cells()
            )));
        }
        if let PmfFamily::CustomTable { table } = &family {
            for (c, cell) in table.iter().enumerate() {
                if cell.len() != family.n_outcomes() || cell.iter().any(|row| row.len() != grid.len()) {
                    return Err(Error::BadSpec(format!(
                        "probability table for cell {c} must be {} x {}",
                        family.n_outcomes(),
                        grid.len()
                    )));
                }
            }
        }
        if let Some(w) = &weights {
            validate_distribution(w, grid.len(), "UH weights")?;
        }
        validate_distribution(&cell_weights, family.n_cells(), "cell weights")?;
        Ok(DiscreteMixtureModel {
            family,
            grid,
            weights,
            cell_weights,
        })
    }

    pub fn family(&self) -> &PmfFamily {
        &self.family
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn cell_weights(&self) -> &[f64] {
        &self.cell_weights
    }

    pub fn n_outcomes(&self) -> usize {
        self.family.n_outcomes()
    }

    pub fn n_cells(&self) -> usize {
        self.family.n_cells()
    }

    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    pub fn n_params(&self) -> usize {
        self.family.n_params()
    }

    /// Length of a moment stacked over cells: `C * M`.
    pub fn support_len(&self) -> usize {
        self.n_cells() * self.n_outcomes()
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        DiscreteMixtureModel::new(
            self.family.clone(),
            self.grid.clone(),
            Some(weights),
            self.cell_weights.clone(),
        )
    }

    /// UH weights supplied explicitly or stored with the model.
    pub fn resolve_weights<'a>(&'a self, eta: Option<&'a [f64]>) -> Result<&'a [f64]> {
        let w = eta
            .or(self.weights.as_deref())
            .ok_or_else(|| Error::BadSpec("UH weights are required".into()))?;
        if w.len() != self.n_grid() {
            return Err(Error::DimensionMismatch {
                expected: self.n_grid(),
                found: w.len(),
            });
        }
        Ok(w)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                found: theta.len(),
            });
        }
        if let PmfFamily::NormalMeans { .. } = self.family {
            if !(theta[0] > 0.0) {
                return Err(Error::BadSpec("normal-means variance must be positive".into()));
            }
        }
        Ok(())
    }

    fn check_cell(&self, cell: usize) -> Result<()> {
        if cell >= self.n_cells() {
            return Err(Error::IndexOutOfRange(format!(
                "cell {cell} of {}",
                self.n_cells()
            )));
        }
        Ok(())
    }

    /// `L[m, g] = f(z_m | alpha_g, cell; theta)`; every column must sum to one.
    pub fn conditional_matrix(&self, theta: &[f64], cell: usize) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_cell(cell)?;
        let m = self.n_outcomes();
        let l = DMatrix::from_fn(m, self.n_grid(), |i, g| {
            self.family.pmf(i, self.grid[g], g, cell, theta)
        });
        for g in 0..self.n_grid() {
            let col = l.column(g);
            if col.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::NonStochastic(format!(
                    "negative or non-finite probability in column {g}"
                )));
            }
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NonStochastic(format!(
                    "column {g} (alpha = {}) sums to {s}",
                    self.grid[g]
                )));
            }
        }
        Ok(l)
    }

    /// `d L / d theta_j`, analytic when available, else central differences
    /// with step `1e-5 (1 + |theta_j|)`.
    pub fn conditional_matrix_derivative(&self, theta: &[f64], cell: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_cell(cell)?;
        if j >= self.n_params() {
            return Err(Error::IndexOutOfRange(format!("parameter {j}")));
        }
        let m = self.n_outcomes();
        let g_len = self.n_grid();
        let mut out = DMatrix::zeros(m, g_len);
        let analytic = self.family.pmf_gradient(0, self.grid[0], cell, theta).is_some();
        if analytic {
            for i in 0..m {
                for g in 0..g_len {
                    let grad = self
                        .family
                        .pmf_gradient(i, self.grid[g], cell, theta)
                        .expect("analytic gradient");
                    out[(i, g)] = grad[j];
                }
            }
        } else {
            let h = 1e-5 * (1.0 + theta[j].abs());
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += h;
            tm[j] -= h;
            for i in 0..m {
                for g in 0..g_len {
                    let fp = self.family.pmf(i, self.grid[g], g, cell, &tp);
                    let fm = self.family.pmf(i, self.grid[g], g, cell, &tm);
                    out[(i, g)] = (fp - fm) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of the UH score operator on stacked moments: the `G x (C M)`
    /// matrix mapping `g` to `E[g | alpha_g] = sum_c w_c sum_m g_{c,m} f(z_m | alpha_g, c)`.
    pub fn stacked_adjoint(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.n_outcomes();
        let mut a = DMatrix::zeros(self.n_grid(), self.support_len());
        for c in 0..self.n_cells() {
            let l = self.conditional_matrix(theta, c)?;
            let w = self.cell_weights[c];
            for g in 0..self.n_grid() {
                for i in 0..m {
                    a[(g, c * m + i)] = w * l[(i, g)];
                }
            }
        }
        Ok(a)
    }

    /// `E[g | alpha]` on the grid for a stacked moment.
    pub fn conditional_expectation(&self, theta: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check_moment_len(g)?;
        let a = self.stacked_adjoint(theta)?;
        Ok((0..self.n_grid())
            .map(|k| (0..g.len()).map(|i| a[(k, i)] * g[i]).sum())
            .collect())
    }

    /// Joint probabilities `p(c, z_m)` stacked as `c * M + m`.
    pub fn outcome_probabilities(&self, theta: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
        let m = self.n_outcomes();
        let mut p = vec![0.0; self.support_len()];
        for c in 0..self.n_cells() {
            let l = self.conditional_matrix(theta, c)?;
            for i in 0..m {
                p[c * m + i] = self.cell_weights[c]
                    * (0..self.n_grid()).map(|g| l[(i, g)] * eta[g]).sum::<f64>();
            }
        }
        Ok(p)
    }

    /// `d p(c, z_m) / d theta_j` stacked like [`Self::outcome_probabilities`].
    pub fn outcome_probability_derivative(&self, theta: &[f64], eta: &[f64], j: usize) -> Result<Vec<f64>> {
        let m = self.n_outcomes();
        let mut dp = vec![0.0; self.support_len()];
        for c in 0..self.n_cells() {
            let dl = self.conditional_matrix_derivative(theta, c, j)?;
            for i in 0..m {
                dp[c * m + i] = self.cell_weights[c]
                    * (0..self.n_grid()).map(|g| dl[(i, g)] * eta[g]).sum::<f64>();
            }
        }
        Ok(dp)
    }

    /// Exact expectation `sum p(c, z) g(c, z)` under `(theta, eta)`.
    pub fn expectation(&self, theta: &[f64], eta: &[f64], g: &[f64]) -> Result<f64> {
        self.check_moment_len(g)?;
        let p = self.outcome_probabilities(theta, eta)?;
        Ok(crate::linalg::dot(&p, g))
    }

    /// `E[g s_theta]`, i.e. the derivative of `theta -> E_{theta, eta}[g]`
    /// with `g` held fixed.
    pub fn score_covariance(&self, theta: &[f64], eta: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check_moment_len(g)?;
        (0..self.n_params())
            .map(|j| {
                let dp = self.outcome_probability_derivative(theta, eta, j)?;
                Ok(crate::linalg::dot(&dp, g))
            })
            .collect()
    }

    /// Parameter scores `s_theta(c, z)` (rows: support points, columns: parameters).
    pub fn theta_scores(&self, theta: &[f64], eta: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.outcome_probabilities(theta, eta)?;
        let mut s = DMatrix::zeros(p.len(), self.n_params());
        for j in 0..self.n_params() {
            let dp = self.outcome_probability_derivative(theta, eta, j)?;
            for i in 0..p.len() {
                s[(i, j)] = if p[i] > 0.0 { dp[i] / p[i] } else { 0.0 };
            }
        }
        Ok(s)
    }

    pub(crate) fn check_moment_len(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.support_len() {
            return Err(Error::DimensionMismatch {
                expected: self.support_len(),
                found: g.len(),
            });
        }
        Ok(())
    }
}

fn validate_distribution(w: &[f64], len: usize, what: &str) -> Result<()> {
    if w.len() != len {
        return Err(Error::BadSpec(format!("{what}: {} entries, expected {len}", w.len())));
    }
    if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::BadSpec(format!("{what} must be non-negative")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-10 {
        return Err(Error::BadSpec(format!("{what} sum to {s}, expected 1")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON model definition files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDef {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub x: Vec<f64>,
    #[serde(default)]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum FamilyDef {
    #[serde(rename = "logit-panel-T2")]
    LogitPanelT2,
    #[serde(rename = "normal-means")]
    NormalMeans,
    /// Probabilities indexed `[cell][outcome][grid point]`.
    #[serde(rename = "custom-table")]
    CustomTable { probabilities: Vec<Vec<Vec<f64>>> },
}

/// On-disk model definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(default)]
    pub outcomes: Vec<String>,
    pub alpha_grid: Vec<f64>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub cells: Vec<CellDef>,
    pub family: FamilyDef,
}

impl ModelFile {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn build(&self) -> Result<DiscreteMixtureModel> {
        let family = match &self.family {
            FamilyDef::LogitPanelT2 => {
                let cells = self
                    .cells
                    .iter()
                    .map(|c| {
                        if c.x.len() != 2 {
                            return Err(Error::BadSpec(
                                "logit-panel-T2 cells need x = [x_1, x_2]".into(),
                            ));
                        }
                        Ok([c.x[0], c.x[1]])
                    })
                    .collect::<Result<Vec<_>>>()?;
                if cells.is_empty() {
                    return Err(Error::BadSpec("logit-panel-T2 needs at least one cell".into()));
                }
                PmfFamily::LogitPanelT2 { cells }
            }
            FamilyDef::NormalMeans => {
                let points = self
                    .outcomes
                    .iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::BadSpec(format!("outcome `{s}` is not numeric")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                PmfFamily::NormalMeans { points }
            }
            FamilyDef::CustomTable { probabilities } => PmfFamily::CustomTable {
                table: probabilities.clone(),
            },
        };
        let n_cells = family.n_cells();
        let cell_weights = if self.cells.iter().any(|c| c.weight.is_some()) {
            if self.cells.len() != n_cells {
                return Err(Error::BadSpec("cell weights must cover every cell".into()));
            }
            self.cells
                .iter()
                .map(|c| {
                    c.weight
                        .ok_or_else(|| Error::BadSpec("cell weights must cover every cell".into()))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![1.0 / n_cells as f64; n_cells]
        };
        DiscreteMixtureModel::new(family, self.alpha_grid.clone(), self.weights.clone(), cell_weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit(cells: Vec<[f64; 2]>, grid: Vec<f64>) -> DiscreteMixtureModel {
        let c = cells.len();
        DiscreteMixtureModel::new(
            PmfFamily::LogitPanelT2 { cells },
            grid,
            None,
            vec![1.0 / c as f64; c],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_logistic_gives_quarter_cells() {
        let m = logit(vec![[0.0, 1.0]], vec![0.0]);
        let l = m.conditional_matrix(&[0.0], 0).unwrap();
        assert!(l.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn logit_entries_match_products_of_logistics() {
        let m = logit(vec![[0.0, 1.0]], vec![0.0]);
        let l = m.conditional_matrix(&[0.5], 0).unwrap();
        // independent evaluation: P(Y1 = 1) = 1/2, P(Y2 = 1) = 1/(1+e^{-0.5})
        let p2 = 1.0 / (1.0 + (-0.5f64).exp());
        let expected = [0.5 * (1.0 - p2), 0.5 * (1.0 - p2), 0.5 * p2, 0.5 * p2];
        for (i, e) in expected.iter().enumerate() {
            assert!((l[(i, 0)] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_free_pmf_has_identical_columns() {
        let table = vec![vec![vec![0.2, 0.2, 0.2], vec![0.8, 0.8, 0.8]]];
        let m = DiscreteMixtureModel::new(
            PmfFamily::CustomTable { table },
            vec![0.0, 1.0, 2.0],
            None,
            vec![1.0],
        )
        .unwrap();
        let l = m.conditional_matrix(&[], 0).unwrap();
        assert_eq!(l.column(0), l.column(2));
    }

    #[test]
    fn non_stochastic_table_is_rejected() {
        let table = vec![vec![vec![0.2], vec![0.7]]];
        let m = DiscreteMixtureModel::new(PmfFamily::CustomTable { table }, vec![0.0], None, vec![1.0])
            .unwrap();
        assert!(matches!(m.conditional_matrix(&[], 0), Err(Error::NonStochastic(_))));
    }

    #[test]
    fn analytic_logit_derivative_matches_differences() {
        let m = logit(vec![[0.3, -1.2]], vec![-0.5, 0.7]);
        let d = m.conditional_matrix_derivative(&[0.4], 0, 0).unwrap();
        let h = 1e-6;
        let lp = m.conditional_matrix(&[0.4 + h], 0).unwrap();
        let lm = m.conditional_matrix(&[0.4 - h], 0).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        assert!((d - fd).amax() < 1e-8);
    }

    #[test]
    fn model_file_round_trip() {
        let text = r#"{
            "outcomes": ["(0,0)", "(1,0)", "(0,1)", "(1,1)"],
            "alpha_grid": [-1.0, 0.0, 1.0],
            "weights": [0.3, 0.4, 0.3],
            "cells": [{"label": "a", "x": [0.0, 1.0]}],
            "family": {"name": "logit-panel-T2"}
        }"#;
        let file: ModelFile = serde_json::from_str(text).unwrap();
        let model = file.build().unwrap();
        assert_eq!(model.support_len(), 4);
        assert_eq!(model.weights().unwrap(), &[0.3, 0.4, 0.3]);
    }
}
