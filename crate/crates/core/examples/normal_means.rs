//! A moment that vanishes at every support point of a normal location
//! mixture, then its mean on simulated data.
//!
//! `cargo run --example normal_means`

use orthomom::dataset::NormalMeansDgp;
use orthomom::funcdiff::normal_means::{default_grid, normal_means_moment};
use orthomom::{linalg, DgpSpec, Family};

fn main() -> orthomom::Result<()> {
    let dgp = NormalMeansDgp::default();
    let grid = default_grid(&dgp.support, dgp.theta0, 401);
    let g = normal_means_moment(&dgp.support, dgp.theta0, &grid)?;
    println!("support {:?}, variance {}, residual {:.1e}", dgp.support, dgp.theta0, g.residual);

    let data = DgpSpec::new(Family::NormalMeans(dgp), 20_000, 5).generate()?;
    let values: Vec<f64> = data.column("z")?.iter().map(|z| g.eval(*z)).collect();
    let t = linalg::mean_zero_test(&values, 0.05)?;
    println!("sample mean {:.4} (se {:.4}), p = {:.3}", linalg::mean(&values), linalg::sd(&values) / (values.len() as f64).sqrt(), t.p_value);
    Ok(())
}
