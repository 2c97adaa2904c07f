//! Simulate the partly linear model and compare the three estimators.
//!
//! `cargo run --example simulate_and_plm`

use orthomom::dataset::PlmDgp;
use orthomom::plm::{cross_fit_nuisances, estimate, score_test_theta, PlmConfig, PlmEstimator, PlmNuisances};
use orthomom::{DgpSpec, Family, LearnerSpec};

fn main() -> orthomom::Result<()> {
    let dgp = PlmDgp::default();
    let data = DgpSpec::new(Family::Plm(dgp.clone()), 2000, 7).generate()?;
    println!("n = {}, columns = {:?}, theta0 = {}", data.n(), data.names(), dgp.theta0);

    let cfg = PlmConfig::with_learner(LearnerSpec::l1(0.01), 5, 7);
    let nuis = cross_fit_nuisances(&data, &cfg)?;
    let oracle = PlmNuisances::from_oracle(&dgp.oracle(&data)?);

    for (label, n) in [("cross-fit", &nuis), ("oracle", &oracle)] {
        for e in [PlmEstimator::Lr2sls, PlmEstimator::Fs2sls, PlmEstimator::Nlr] {
            let fit = estimate(&data, n, e)?;
            println!(
                "{label:9} {:8} theta = {:.4} (se {:.4})",
                e.name(),
                fit.theta_hat,
                fit.se
            );
        }
    }

    let t = score_test_theta(&data, &nuis, dgp.theta0, 0.05)?;
    println!("score test at theta0: stat {:.3}, p = {:.3}", t.statistic, t.p_value);
    Ok(())
}
