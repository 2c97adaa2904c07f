//! Slope in a linear random-coefficient model from the residualized moment.
//!
//! `cargo run --example random_coefficients`

use orthomom::dataset::RandomCoefficientDgp;
use orthomom::funcdiff::random_coef::{conditional_means, random_coefficient_estimate, random_coefficient_moment};
use orthomom::{linalg, DgpSpec, Family};

fn main() -> orthomom::Result<()> {
    let dgp = RandomCoefficientDgp::default();
    let data = DgpSpec::new(Family::RandomCoefficient(dgp.clone()), 5000, 9).generate()?;
    let (ex1, ey) = dgp.oracle_means(&data)?;
    let theta = random_coefficient_estimate(&data, &ex1, &ey)?;
    println!("theta0 {}  estimate {theta:.4}", dgp.theta0);

    let m = random_coefficient_moment(&data, dgp.theta0, &ex1, &ey)?;
    for b in conditional_means(&m, data.column("alpha_bin")?)? {
        println!("alpha bin {}: n = {}, mean moment {:.4} (se {:.4})", b.bin, b.count, b.mean, b.se);
    }
    println!("overall mean {:.4}", linalg::mean(&m));
    Ok(())
}
