//! Average marginal effect `psi = E[d/dx mu(X, Z2)]` with a known
//! conditional density of `X` given `Z2`.
//!
//! The orthogonal moment is `-Y f'/f - (d_x mu + mu f'/f) - psi`, where
//! `f = f(x | z2)` and `f'` is its `x`-derivative. The correction term has
//! mean zero for every `mu`, so first-order errors in `mu` do not move the
//! estimate. The plug-in `mean(d_x mu)` is reported alongside.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Densities below this are treated as zero.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Central-difference step as a fraction of `sd(X)`.
pub const STEP_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmeResult {
    pub psi: f64,
    pub se: f64,
    pub plug_in: f64,
    pub plug_in_se: f64,
    /// Per-observation orthogonal moment at `psi`.
    pub moment_values: Vec<f64>,
}

/// Orthogonal and plug-in estimates of the average marginal effect.
///
/// `density(x, z2)` returns `(f, d_x f)`; `mu(x, z2)` is the fitted
/// regression of the outcome, differentiated numerically.
pub fn ame_moment<D, M>(data: &Dataset, density: D, mu: M) -> Result<AmeResult>
where
    D: Fn(f64, f64) -> (f64, f64),
    M: Fn(f64, f64) -> f64,
{
    let (y, x, z) = columns(data)?;
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewRows("need at least two rows".into()));
    }
    let h = STEP_FRACTION * linalg::sd(x);
    if !(h > 0.0) {
        return Err(Error::DegenerateVariance("X is constant".into()));
    }
    let mut raw = Vec::with_capacity(n);
    let mut slopes = Vec::with_capacity(n);
    for i in 0..n {
        let (f, df) = density(x[i], z[i]);
        if !(f >= DENSITY_FLOOR) {
            return Err(Error::DensityNearZero(format!(
                "density {f:.3e} at row {i} (x = {}, z2 = {})",
                x[i], z[i]
            )));
        }
        let score = df / f;
        let m = mu(x[i], z[i]);
        let dm = (mu(x[i] + h, z[i]) - mu(x[i] - h, z[i])) / (2.0 * h);
        raw.push(-y[i] * score - dm - m * score);
        slopes.push(dm);
    }
    let psi = linalg::mean(&raw);
    let plug_in = linalg::mean(&slopes);
    let sn = (n as f64).sqrt();
    Ok(AmeResult {
        psi,
        se: linalg::sd(&raw) / sn,
        plug_in,
        plug_in_se: linalg::sd(&slopes) / sn,
        moment_values: raw.iter().map(|v| v - psi).collect(),
    })
}

fn columns(data: &Dataset) -> Result<(&[f64], &[f64], &[f64])> {
    let y = data.y1()?;
    let xs = data.x_columns()?;
    let zs = data.z2_columns()?;
    if xs.len() != 1 || zs.len() != 1 {
        return Err(Error::InvalidDataset(
            "marginal effects need exactly one control and one instrument column".into(),
        ));
    }
    Ok((y, xs[0], zs[0]))
}

/// `mu(x, z2) = b0 + b1 x + b2 z2 + b3 x z2` by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMu {
    pub coef: [f64; 4],
}

impl LinearMu {
    pub fn value(&self, x: f64, z2: f64) -> f64 {
        let b = self.coef;
        b[0] + b[1] * x + b[2] * z2 + b[3] * x * z2
    }
}

pub fn fit_linear_mu(data: &Dataset) -> Result<LinearMu> {
    let (y, x, z) = columns(data)?;
    let n = y.len();
    let design = nalgebra::DMatrix::from_fn(n, 4, |i, j| match j {
        0 => 1.0,
        1 => x[i],
        2 => z[i],
        _ => x[i] * z[i],
    });
    let b = linalg::lstsq(&design, &nalgebra::DVector::from_column_slice(y))?;
    Ok(LinearMu {
        coef: [b[0], b[1], b[2], b[3]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AmeDgp, DgpSpec, Family};

    fn sample(n: usize, seed: u64, dgp: AmeDgp) -> Dataset {
        DgpSpec::new(Family::Ame(dgp), n, seed).generate().unwrap()
    }

    #[test]
    fn recovers_mean_slope() {
        let dgp = AmeDgp::default();
        let d = sample(10_000, 1, dgp.clone());
        let mu = fit_linear_mu(&d).unwrap();
        let r = ame_moment(&d, |x, z| dgp.density(x, z), |x, z| mu.value(x, z)).unwrap();
        assert!((r.psi - dgp.alpha2_mean).abs() < 3.0 * r.se, "{} +- {}", r.psi, r.se);
    }

    #[test]
    fn no_slope_means_zero_effect() {
        let dgp = AmeDgp {
            alpha2_mean: 0.0,
            alpha2_sd: 0.0,
            ..AmeDgp::default()
        };
        let d = sample(10_000, 2, dgp.clone());
        let mu = fit_linear_mu(&d).unwrap();
        let r = ame_moment(&d, |x, z| dgp.density(x, z), |x, z| mu.value(x, z)).unwrap();
        assert!(r.psi.abs() < 3.0 * r.se);
    }

    #[test]
    fn correction_absorbs_regression_error() {
        let dgp = AmeDgp::default();
        let d = sample(10_000, 3, dgp.clone());
        let mu = fit_linear_mu(&d).unwrap();
        let base = ame_moment(&d, |x, z| dgp.density(x, z), |x, z| mu.value(x, z)).unwrap();
        let bumped = ame_moment(
            &d,
            |x, z| dgp.density(x, z),
            |x, z| mu.value(x, z) + 0.1 * (x + 0.3 * z).sin(),
        )
        .unwrap();
        let d_orth = (bumped.psi - base.psi).abs();
        let d_plug = (bumped.plug_in - base.plug_in).abs();
        assert!(d_orth < 0.1 * d_plug, "{d_orth} vs {d_plug}");
    }

    #[test]
    fn zero_density_is_rejected() {
        let d = sample(50, 4, AmeDgp::default());
        assert!(matches!(
            ame_moment(&d, |_, _| (0.0, 0.0), |x, _| x),
            Err(Error::DensityNearZero(_))
        ));
    }
}
