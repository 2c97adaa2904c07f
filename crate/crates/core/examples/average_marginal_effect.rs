//! Orthogonal and plug-in average marginal effects, before and after a
//! perturbation of the fitted regression.
//!
//! `cargo run --example average_marginal_effect`

use orthomom::dataset::AmeDgp;
use orthomom::funcdiff::{ame_moment, fit_linear_mu};
use orthomom::{DgpSpec, Family};

fn main() -> orthomom::Result<()> {
    let dgp = AmeDgp::default();
    let data = DgpSpec::new(Family::Ame(dgp.clone()), 10_000, 8).generate()?;
    let mu = fit_linear_mu(&data)?;
    let density = |x: f64, z: f64| dgp.density(x, z);
    println!("true AME {:.4}", dgp.alpha2_mean);
    for (label, amp) in [("fitted mu", 0.0), ("perturbed mu", 0.1)] {
        let r = ame_moment(&data, density, |x, z| mu.value(x, z) + amp * (x + 0.3 * z).sin())?;
        println!(
            "{label:13} orthogonal {:.4} (se {:.4})  plug-in {:.4} (se {:.4})",
            r.psi, r.se, r.plug_in, r.plug_in_se
        );
    }
    Ok(())
}
