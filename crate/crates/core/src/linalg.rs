//! Small dense linear-algebra and summary-statistics helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a direction counts as null.
pub const NULL_TOL: f64 = 1e-10;

/// Compensated (Neumaier) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    neumaier_sum(values.iter().copied()) / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator). Zero for fewer than two values.
pub fn sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss = neumaier_sum(values.iter().map(|v| (v - m) * (v - m)));
    (ss / (n - 1) as f64).sqrt()
}

/// Root mean square.
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (neumaier_sum(values.iter().map(|v| v * v)) / values.len() as f64).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    neumaier_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

/// Two-sided p-value of a standard-normal statistic.
pub fn two_sided_p(statistic: f64) -> f64 {
    (2.0 * (1.0 - normal_cdf(statistic.abs()))).clamp(0.0, 1.0)
}

/// Normal-approximation test of `E[g] = 0` from per-observation values:
/// `t = sqrt(n) mean(g) / sd(g)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanZeroTest {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub level: f64,
}

pub fn mean_zero_test(values: &[f64], level: f64) -> Result<MeanZeroTest> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::BadSpec(format!("level {level} outside (0, 1)")));
    }
    let s = sd(values);
    if !(s >= 1e-12) {
        return Err(Error::DegenerateVariance(format!(
            "sd of the moment is {s:.3e}"
        )));
    }
    let statistic = (values.len() as f64).sqrt() * mean(values) / s;
    let p_value = two_sided_p(statistic);
    Ok(MeanZeroTest {
        statistic,
        p_value,
        reject: p_value < level,
        level,
    })
}

/// Build an `n x d` matrix from column vectors.
pub fn from_columns(columns: &[&[f64]], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i])
}

/// Least squares `min ||x b - y||` via Householder QR.
///
/// Fails with `RankDeficient` when a diagonal entry of R is below
/// `1e-10 * max |R_ii|`.
pub fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    if n < p {
        return Err(Error::RankDeficient(format!(
            "{n} rows for {p} columns"
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if max_diag == 0.0 {
        return Err(Error::RankDeficient("zero design".into()));
    }
    for i in 0..p {
        if r[(i, i)].abs() <= NULL_TOL * max_diag {
            return Err(Error::RankDeficient(format!(
                "column {i} is (numerically) collinear with earlier columns"
            )));
        }
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("triangular solve failed".into()))?;
    Ok(beta)
}

/// Singular values, left and right singular vectors of `a`, padding with zero
/// rows when `a` is wide so that the full right singular basis is available.
fn full_svd(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let padded = if m < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, m).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    (svd.singular_values, v_t.transpose())
}

/// Orthonormal basis (as columns) of `{x : a x = 0}`.
///
/// Singular values at or below `rel_tol * sigma_max` count as zero.
pub fn nullspace(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let (sv, v) = full_svd(a);
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let cutoff = rel_tol * smax;
    let null_cols: Vec<usize> = (0..n)
        .filter(|&j| smax == 0.0 || sv[j] <= cutoff)
        .collect();
    let mut basis = DMatrix::zeros(n, null_cols.len());
    for (k, &j) in null_cols.iter().enumerate() {
        basis.set_column(k, &v.column(j));
    }
    basis
}

/// Numerical rank with the relative singular-value cutoff.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Minimum-norm least-squares solution of `a x = b` through the SVD
/// pseudoinverse.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DVector::zeros(n);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DVector::zeros(n);
    }
    let eps = rel_tol * smax;
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(n))
}

/// 2-norm condition number (infinite for singular matrices).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return f64::INFINITY;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Solve a square system, refusing when the condition number exceeds `max_cond`.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>, max_cond: f64) -> Option<DVector<f64>> {
    if condition_number(a) > max_cond {
        return None;
    }
    a.clone().lu().solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumaier_recovers_cancellation() {
        let v = vec![1e16, 1.0, -1e16];
        assert_eq!(neumaier_sum(v), 1.0);
    }

    #[test]
    fn nullspace_of_wide_matrix() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let ns = nullspace(&a, NULL_TOL);
        assert_eq!(ns.ncols(), 2);
        let r = &a * &ns;
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn lstsq_flags_collinear_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(lstsq(&x, &y), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn pinv_gives_minimum_norm_solution() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let x = pinv_solve(&a, &b, NULL_TOL);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sided_p_at_196() {
        assert!((two_sided_p(1.959964) - 0.05).abs() < 1e-6);
    }
}
