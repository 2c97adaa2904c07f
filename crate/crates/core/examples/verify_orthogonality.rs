//! Numerical Gateaux derivatives of the orthogonal and plug-in moments along
//! random nuisance paths.
//!
//! `cargo run --example verify_orthogonality`

use orthomom::dataset::PlmDgp;
use orthomom::diagnostics::{
    power_slope, random_bumps, verify_orthogonality, NuisanceComponent, PathFunctional, PerturbationPath, PlmMoment,
    PlmMomentKind,
};

fn main() -> orthomom::Result<()> {
    let dgp = PlmDgp::default();
    let paths: Vec<PerturbationPath> = [NuisanceComponent::Eta, NuisanceComponent::FirstStage, NuisanceComponent::LongRegression]
        .into_iter()
        .flat_map(|component| {
            let dim = if component == NuisanceComponent::LongRegression { dgp.d + 1 } else { dgp.d };
            random_bumps(dim, 3, 0.5, 1)
                .into_iter()
                .map(move |bump| PerturbationPath::Additive { component, bump })
        })
        .collect();
    for kind in [PlmMomentKind::Orthogonal, PlmMomentKind::PlugIn] {
        let m = PlmMoment::new(&dgp, kind, 20_000, 1)?;
        let rep = verify_orthogonality(&m, &paths, 1e-2, 1e-3 * 0.5 * m.scale())?;
        println!(
            "{kind:?}: max |derivative| {:.2e} (tolerance {:.2e}) pass {}  power slope {:.4}",
            rep.max_abs,
            rep.tolerance,
            rep.pass,
            power_slope(&m, &[1.0], 1e-2)?
        );
    }
    Ok(())
}
