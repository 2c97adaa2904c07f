//! Fit each learner and cross-fit out-of-fold predictions.
//!
//! `cargo run --example learners_cross_fit`

use orthomom::dataset::PlmDgp;
use orthomom::{cross_fit, fit, linalg, CrossFitPlan, DgpSpec, Family, LearnerSpec};

fn main() -> orthomom::Result<()> {
    let data = DgpSpec::new(Family::Plm(PlmDgp::default()), 600, 3).generate()?;
    let x = data.x_matrix()?;
    let y = data.y1()?;

    let plan = CrossFitPlan::new(data.n(), 5, 3)?;
    println!("fold sizes {:?}", plan.fold_sizes());

    let learners = [
        LearnerSpec::Constant,
        LearnerSpec::LeastSquares,
        LearnerSpec::Ridge { lambda: 0.1 },
        LearnerSpec::l1(0.02),
        LearnerSpec::L1Penalized { lambda: None, cv_folds: 4, seed: 3 },
        LearnerSpec::KernelSmoother { bandwidth: None },
        LearnerSpec::BoostedStumps { rounds: 100, depth: 2, learning_rate: 0.1, min_leaf: 5 },
        LearnerSpec::KNearest { k: 15 },
    ];
    for spec in &learners {
        let in_sample = fit(spec, &x, y)?.predict(&x)?;
        let oof = cross_fit(spec, &x, y, 5, 3)?;
        let mse = |p: &[f64]| linalg::mean(&p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).collect::<Vec<_>>());
        println!(
            "{:60} in-sample mse {:.4}  out-of-fold mse {:.4}",
            serde_json::to_string(spec).unwrap(),
            mse(&in_sample),
            mse(&oof.values)
        );
    }
    Ok(())
}
