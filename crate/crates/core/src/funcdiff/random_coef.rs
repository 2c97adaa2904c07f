//! Linear random coefficients `Y = theta X1 + alpha0 + alpha1 W`: the
//! residual moment `(Y~ - theta X1~) X1~` with `V~ = V - E[V | W]` has zero
//! mean given `alpha`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Moment values `(Y~ - theta X1~) X1~` given `E[X1 | W]` and `E[Y | W]`.
pub fn random_coefficient_moment(data: &Dataset, theta: f64, ex1: &[f64], ey: &[f64]) -> Result<Vec<f64>> {
    let y = data.column("y")?;
    let x1 = data.column("x1")?;
    for v in [ex1, ey] {
        if v.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                found: v.len(),
            });
        }
    }
    Ok((0..y.len())
        .map(|i| {
            let xt = x1[i] - ex1[i];
            (y[i] - ey[i] - theta * xt) * xt
        })
        .collect())
}

/// Root of the sample moment: `sum Y~ X1~ / sum X1~^2`.
pub fn random_coefficient_estimate(data: &Dataset, ex1: &[f64], ey: &[f64]) -> Result<f64> {
    let y = data.column("y")?;
    let x1 = data.column("x1")?;
    let xt: Vec<f64> = x1.iter().zip(ex1).map(|(a, b)| a - b).collect();
    let yt: Vec<f64> = y.iter().zip(ey).map(|(a, b)| a - b).collect();
    let den = linalg::dot(&xt, &xt);
    if den == 0.0 {
        return Err(Error::DegenerateVariance("X1 has no variation given W".into()));
    }
    Ok(linalg::dot(&yt, &xt) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMean {
    pub bin: usize,
    pub count: usize,
    pub mean: f64,
    /// Standard error of `mean`.
    pub se: f64,
}

/// Mean of `values` within each integer-coded bin.
pub fn conditional_means(values: &[f64], bins: &[f64]) -> Result<Vec<BinMean>> {
    if values.len() != bins.len() {
        return Err(Error::DimensionMismatch {
            expected: values.len(),
            found: bins.len(),
        });
    }
    let n_bins = bins.iter().map(|b| *b as usize + 1).max().unwrap_or(0);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for (v, b) in values.iter().zip(bins) {
        if *b < 0.0 || b.fract() != 0.0 {
            return Err(Error::InvalidDataset(format!("bin label {b} is not a non-negative integer")));
        }
        groups[*b as usize].push(*v);
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(bin, g)| BinMean {
            bin,
            count: g.len(),
            mean: linalg::mean(&g),
            se: if g.len() > 1 {
                linalg::sd(&g) / (g.len() as f64).sqrt()
            } else {
                f64::INFINITY
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DgpSpec, Family, RandomCoefficientDgp};

    #[test]
    fn conditional_means_vanish_in_every_bin() {
        let dgp = RandomCoefficientDgp::default();
        let d = DgpSpec::new(Family::RandomCoefficient(dgp.clone()), 20_000, 5)
            .generate()
            .unwrap();
        let (ex1, ey) = dgp.oracle_means(&d).unwrap();
        let g = random_coefficient_moment(&d, dgp.theta0, &ex1, &ey).unwrap();
        let bins = conditional_means(&g, d.column("alpha_bin").unwrap()).unwrap();
        assert_eq!(bins.len(), dgp.alpha_grid.len());
        for b in bins {
            assert!(b.mean.abs() < 4.0 * b.se, "bin {}: {} vs {}", b.bin, b.mean, b.se);
        }
    }

    #[test]
    fn wrong_theta_shifts_the_mean() {
        let dgp = RandomCoefficientDgp::default();
        let d = DgpSpec::new(Family::RandomCoefficient(dgp.clone()), 5000, 6)
            .generate()
            .unwrap();
        let (ex1, ey) = dgp.oracle_means(&d).unwrap();
        let g = random_coefficient_moment(&d, dgp.theta0 + 0.5, &ex1, &ey).unwrap();
        let t = linalg::mean(&g) / (linalg::sd(&g) / (g.len() as f64).sqrt());
        assert!(t.abs() > 10.0);
        let est = random_coefficient_estimate(&d, &ex1, &ey).unwrap();
        assert!((est - dgp.theta0).abs() < 0.1);
    }

    #[test]
    fn bin_labels_must_be_integers() {
        assert!(conditional_means(&[1.0, 2.0], &[0.0, 0.5]).is_err());
        let m = conditional_means(&[1.0, 3.0, 5.0], &[0.0, 0.0, 2.0]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].mean, 2.0);
    }
}
