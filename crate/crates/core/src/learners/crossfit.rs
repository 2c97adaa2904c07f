use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, LearnerSpec};
use crate::error::{Error, Result};

/// A seeded partition of `0..n` into `k` folds whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    k: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl CrossFitPlan {
    /// Rows are shuffled with a ChaCha8 stream seeded by `seed`; the row at
    /// shuffled position `p` lands in fold `p mod k`.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > n {
            return Err(Error::TooFewRows(format!(
                "need 2 <= K <= n, got K = {k}, n = {n}"
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n];
        for (pos, &row) in perm.iter().enumerate() {
            assignment[row] = pos % k;
        }
        Ok(CrossFitPlan { k, assignment, seed })
    }

    /// Leave-one-out plan (`K = n`).
    pub fn leave_one_out(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewRows("leave-one-out needs n >= 2".into()));
        }
        Ok(CrossFitPlan {
            k: n,
            assignment: (0..n).collect(),
            seed: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Out-of-fold predictions: `values[i]` comes from a model that never saw
/// row `i`'s fold.
#[derive(Debug, Clone)]
pub struct OofPredictions {
    pub values: Vec<f64>,
    pub plan: CrossFitPlan,
    pub learner: LearnerSpec,
}

/// K-fold cross-fitting with a fresh seeded plan. Requires `n >= 2K`.
pub fn cross_fit(
    spec: &LearnerSpec,
    features: &DMatrix<f64>,
    target: &[f64],
    k: usize,
    seed: u64,
) -> Result<OofPredictions> {
    let n = features.nrows();
    if k < 2 || n < 2 * k {
        return Err(Error::TooFewRows(format!(
            "cross-fitting needs K >= 2 and n >= 2K, got K = {k}, n = {n}"
        )));
    }
    cross_fit_with_plan(spec, features, target, &CrossFitPlan::new(n, k, seed)?)
}

/// Cross-fitting on an existing plan (any `2 <= K <= n`, including
/// leave-one-out). Fold models are fitted in parallel.
pub fn cross_fit_with_plan(
    spec: &LearnerSpec,
    features: &DMatrix<f64>,
    target: &[f64],
    plan: &CrossFitPlan,
) -> Result<OofPredictions> {
    let n = features.nrows();
    if plan.n() != n || target.len() != n {
        return Err(Error::DimensionMismatch {
            expected: plan.n(),
            found: n.max(target.len()),
        });
    }
    let per_fold: Vec<(Vec<usize>, Vec<f64>)> = (0..plan.k())
        .into_par_iter()
        .map(|f| {
            let train = plan.train_rows(f);
            let test = plan.fold_rows(f);
            let yt: Vec<f64> = train.iter().map(|&i| target[i]).collect();
            let model = fit(spec, &features.select_rows(&train), &yt)?;
            let pred = model.predict(&features.select_rows(&test))?;
            Ok((test, pred))
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n];
    for (rows, pred) in per_fold {
        for (i, p) in rows.into_iter().zip(pred) {
            values[i] = p;
        }
    }
    Ok(OofPredictions {
        values,
        plan: plan.clone(),
        learner: spec.clone(),
    })
}

/// How a nuisance regression produces its fitted values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Fitting {
    /// Fit on all rows and predict the same rows.
    InSample,
    /// Out-of-fold predictions from a seeded K-fold plan.
    CrossFit { k: usize, seed: u64 },
}

/// Fitted values of `target` on `features` under the given fitting mode.
pub fn fit_predict(
    spec: &LearnerSpec,
    features: &DMatrix<f64>,
    target: &[f64],
    fitting: Fitting,
) -> Result<Vec<f64>> {
    match fitting {
        Fitting::InSample => fit(spec, features, target)?.predict(features),
        Fitting::CrossFit { k, seed } => Ok(cross_fit(spec, features, target, k, seed)?.values),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn balanced_fold_sizes() {
        let plan = CrossFitPlan::new(103, 5, 42).unwrap();
        let mut s = plan.fold_sizes();
        s.sort_unstable();
        assert_eq!(s, vec![20, 20, 21, 21, 21]);
    }

    #[test]
    fn leave_one_out_constant_learner() {
        let x = random_matrix(7, 1, 1);
        let y = [1.0, 4.0, -2.0, 0.5, 3.0, 8.0, -1.0];
        let total: f64 = y.iter().sum();
        let oof = cross_fit_with_plan(
            &LearnerSpec::Constant,
            &x,
            &y,
            &CrossFitPlan::new(7, 7, 3).unwrap(),
        )
        .unwrap();
        for i in 0..7 {
            assert!((oof.values[i] - (total - y[i]) / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_linear_recovered_out_of_fold() {
        let x = random_matrix(100, 3, 2);
        let truth: Vec<f64> = (0..100)
            .map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 1)] + 0.5 * x[(i, 2)])
            .collect();
        let oof = cross_fit(&LearnerSpec::LeastSquares, &x, &truth, 5, 9).unwrap();
        let err = oof
            .values
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8);
    }

    #[test]
    fn too_few_rows() {
        let x = random_matrix(9, 1, 3);
        assert!(matches!(
            cross_fit(&LearnerSpec::Constant, &x, &[0.0; 9], 5, 0),
            Err(Error::TooFewRows(_))
        ));
    }

    #[test]
    fn plan_is_seed_deterministic() {
        assert_eq!(CrossFitPlan::new(50, 5, 7).unwrap(), CrossFitPlan::new(50, 5, 7).unwrap());
        assert_ne!(CrossFitPlan::new(50, 5, 7).unwrap(), CrossFitPlan::new(50, 5, 8).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn corrupting_a_target_leaves_its_own_prediction_unchanged(
            seed in 0u64..500, row in 0usize..40, shift in 1.0f64..100.0
        ) {
            let x = random_matrix(40, 2, seed);
            let y: Vec<f64> = (0..40).map(|i| x[(i, 0)] * 2.0 + (i as f64).cos()).collect();
            let mut y_bad = y.clone();
            y_bad[row] += shift;
            let spec = LearnerSpec::LeastSquares;
            let a = cross_fit(&spec, &x, &y, 4, seed).unwrap();
            let b = cross_fit(&spec, &x, &y_bad, 4, seed).unwrap();
            prop_assert_eq!(a.values[row], b.values[row]);
            let fold = a.plan.assignment()[row];
            for i in 0..40 {
                if a.plan.assignment()[i] == fold {
                    prop_assert_eq!(a.values[i], b.values[i]);
                }
            }
        }

        #[test]
        fn every_row_in_exactly_one_fold(n in 2usize..200, k in 2usize..12, seed in 0u64..100) {
            prop_assume!(k <= n);
            let plan = CrossFitPlan::new(n, k, seed).unwrap();
            let sizes = plan.fold_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().all(|&s| s >= 1));
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
