use orthomom::dataset::{HteDgp, LogitPanelDgp, PlmDgp};
use orthomom::diagnostics::{LocalAlternative, PlmLocal};
use orthomom::funcdiff::MomentKind;
use orthomom::hte::HteConfig;
use orthomom::mc::{run, McConfig, Pipeline};
use orthomom::plm::{PlmConfig, PlmEstimator};
use orthomom::{DgpSpec, Family};

fn config(family: Family, n: usize, r: usize, pipeline: Pipeline, seed: u64) -> McConfig {
    McConfig {
        replications: r,
        n,
        dgp: DgpSpec::new(family, n, 0),
        pipeline,
        seed,
        level: 0.05,
        threads: None,
    }
}

/// Rate `p` within `k` binomial standard errors of `target`.
fn near(p: f64, target: f64, r: usize, k: f64) -> bool {
    (p - target).abs() <= k * (target * (1.0 - target) / r as f64).sqrt()
}

#[test]
fn oracle_plm_test_has_nominal_size() {
    let r = 400;
    let rep = run(&config(
        Family::Plm(PlmDgp::default()),
        500,
        r,
        Pipeline::PlmTest {
            estimator: PlmEstimator::Lr2sls,
            config: PlmConfig::default(),
            theta_bar: None,
            oracle: true,
        },
        1,
    ))
    .unwrap();
    assert!(near(rep.rejection_rate.unwrap(), 0.05, r, 3.0), "{:?}", rep.rejection_rate);
    assert!(near(rep.coverage.unwrap(), 0.95, r, 3.0), "{:?}", rep.coverage);
}

#[test]
fn wrong_null_is_rejected() {
    let rep = run(&config(
        Family::Plm(PlmDgp::default()),
        1000,
        100,
        Pipeline::PlmTest {
            estimator: PlmEstimator::Lr2sls,
            config: PlmConfig::default(),
            theta_bar: Some(1.5),
            oracle: false,
        },
        2,
    ))
    .unwrap();
    assert!(rep.rejection_rate.unwrap() > 0.9);
}

#[test]
fn funcdiff_moments_have_mean_zero() {
    let r = 300;
    for mode in [MomentKind::Nf, MomentKind::FullyRobust] {
        let rep = run(&config(
            Family::LogitPanel(LogitPanelDgp::default()),
            800,
            r,
            Pipeline::Funcdiff { mode, functional: None },
            3,
        ))
        .unwrap();
        assert_eq!(rep.failures, 0);
        assert!(near(rep.rejection_rate.unwrap(), 0.05, r, 3.5), "{mode:?}: {:?}", rep.rejection_rate);
    }
}

#[test]
fn drift_matches_local_power_prediction() {
    let delta = 1.5;
    let rep = run(&config(Family::Plm(PlmDgp::default()), 400, 600, Pipeline::Diagnostics { delta }, 4)).unwrap();
    let predicted = PlmLocal::new(PlmDgp::default(), 200_000, 4).unwrap().predicted_drift(delta);
    assert!((rep.truth - predicted).abs() < 1e-12);
    let mc_se = rep.sd.unwrap() / (600f64).sqrt();
    assert!(rep.bias.unwrap().abs() < 4.0 * mc_se, "{:?} vs {mc_se}", rep.bias);
}

#[test]
fn hte_estimate_is_centered() {
    let mut dgp = HteDgp::default();
    dgp.eta04[2] = 0.3;
    let rep = run(&config(
        Family::Hte(dgp),
        800,
        200,
        Pipeline::HteEstimate {
            config: HteConfig {
                l: 2,
                ..HteConfig::default()
            },
            oracle: false,
        },
        5,
    ))
    .unwrap();
    assert!((rep.truth - 0.3).abs() < 1e-15);
    assert!(rep.bias.unwrap().abs() < 4.0 * rep.sd.unwrap() / (200f64).sqrt());
}
