use nalgebra::DMatrix;
use proptest::prelude::*;

use orthomom::dataset::{LogitPanelDgp, PlmDgp};
use orthomom::funcdiff::{
    fully_robust_moment, nf_basis, nf_residual, relevance_constant, solve_partial_moment, theta_sensitivity,
    DiscreteMixtureModel, PmfFamily, RieszSpec,
};
use orthomom::linalg;
use orthomom::mc::replication_seed;
use orthomom::plm::{estimate, PlmEstimator, PlmNuisances};
use orthomom::{read_csv, DgpSpec, Family};

fn plm_case(seed: u64) -> (orthomom::Dataset, PlmNuisances) {
    let dgp = PlmDgp::default();
    let data = DgpSpec::new(Family::Plm(dgp.clone()), 400, seed).generate().unwrap();
    let nuis = PlmNuisances::from_oracle(&dgp.oracle(&data).unwrap());
    (data, nuis)
}

/// Same nuisances with the instrument `mu - r2` multiplied by `c`.
fn rescaled(n: &PlmNuisances, c: f64) -> PlmNuisances {
    PlmNuisances {
        mu: n.r2.iter().zip(&n.mu).map(|(r, m)| r + c * (m - r)).collect(),
        ..n.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nullspace_is_annihilated(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let ns = linalg::nullspace(&a, 1e-10);
        prop_assert_eq!(ns.ncols() + linalg::rank(&a, 1e-10), cols);
        prop_assert!((&a * &ns).amax() < 1e-10);
    }

    #[test]
    fn quantile_inverts_cdf(p in 1e-6f64..(1.0 - 1e-6)) {
        prop_assert!((linalg::normal_cdf(linalg::normal_quantile(p)) - p).abs() < 1e-9);
    }

    #[test]
    fn replication_seeds_differ(master in any::<u64>(), i in 0u64..1_000_000) {
        prop_assert_ne!(replication_seed(master, i), replication_seed(master, i + 1));
    }

    #[test]
    fn csv_round_trip(seed in 0u64..1000, n in 1usize..40) {
        let d = DgpSpec::new(Family::Plm(PlmDgp::default()), n, seed).generate().unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(&buf[..], d.roles().clone()).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn estimators_respect_instrument_rescaling(seed in 0u64..500, c in 0.1f64..10.0) {
        let (data, nuis) = plm_case(seed);
        let scaled = rescaled(&nuis, c);
        for e in [PlmEstimator::Lr2sls, PlmEstimator::Fs2sls] {
            let a = estimate(&data, &nuis, e).unwrap().theta_hat;
            let b = estimate(&data, &scaled, e).unwrap().theta_hat;
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        let a = estimate(&data, &nuis, PlmEstimator::Nlr).unwrap().theta_hat;
        let b = estimate(&data, &scaled, PlmEstimator::Nlr).unwrap().theta_hat;
        prop_assert!((b - a / c).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn logit_moments_hold_for_any_parameters(
        theta in -1.5f64..1.5,
        x in prop::collection::vec(-2.0f64..2.0, 4),
        raw_w in prop::collection::vec(0.1f64..1.0, 3),
    ) {
        let total: f64 = raw_w.iter().sum();
        let eta: Vec<f64> = raw_w.iter().map(|w| w / total).collect();
        let model = DiscreteMixtureModel::new(
            PmfFamily::LogitPanelT2 { cells: vec![[x[0], x[1]], [x[2], x[3]]] },
            vec![-1.0, 0.0, 1.0],
            Some(eta.clone()),
            vec![0.5, 0.5],
        ).unwrap();
        let th = [theta];
        let basis = nf_basis(&model, &th).unwrap();
        for g in &basis {
            prop_assert!(nf_residual(&model, &th, g).unwrap() < 1e-10);
        }
        let r = RieszSpec::mean_alpha(&model);
        let partial = solve_partial_moment(&model, &th, &r, &eta).unwrap();
        prop_assert!((relevance_constant(&model, &th, &eta, &partial, &r).unwrap() - 1.0).abs() < 1e-8);
        if let Some(first) = basis.first() {
            let nf = std::slice::from_ref(first);
            if let Ok(fully) = fully_robust_moment(&model, &th, &eta, &partial, nf) {
                let s = theta_sensitivity(&model, &th, &eta, &fully.values, 1e-5).unwrap();
                prop_assert!(s[0].abs() < 1e-6 * linalg::norm(&fully.values).max(1.0));
                prop_assert!((relevance_constant(&model, &th, &eta, &fully, &r).unwrap() - 1.0).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn default_logit_panel_has_one_free_direction() {
    let lp = LogitPanelDgp::default();
    let basis = nf_basis(&lp.model().unwrap(), &[lp.theta0]).unwrap();
    assert_eq!(basis.len(), 1);
}
