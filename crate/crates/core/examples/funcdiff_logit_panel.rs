//! Nuisance-free, partial and fully robust moments for a two-period logit
//! panel with fixed effects.
//!
//! `cargo run --example funcdiff_logit_panel`

use orthomom::dataset::LogitPanelDgp;
use orthomom::funcdiff::{build_moment, nf_residual, relevance_constant, theta_sensitivity, MomentKind, RieszSpec};

fn main() -> orthomom::Result<()> {
    let lp = LogitPanelDgp::default();
    let model = lp.model()?;
    let theta = [lp.theta0];
    let eta = lp.alpha_weights.clone();
    let r = RieszSpec::mean_alpha(&model);
    println!("{} cells, {} outcomes, psi = E[alpha] = {:.4}", model.n_cells(), model.n_outcomes(), r.psi(&eta));

    for kind in [MomentKind::Nf, MomentKind::Partial, MomentKind::FullyRobust] {
        let g = build_moment(&model, &theta, &eta, kind, Some(&r))?;
        let c = relevance_constant(&model, &theta, &eta, &g, &r)?;
        let s = theta_sensitivity(&model, &theta, &eta, &g.values, 1e-5)?;
        println!("{kind:?}: C = {c:.4}, d/dtheta E[g] = {:.2e}", s[0]);
        if kind == MomentKind::Nf {
            println!("  max |E[g | alpha]| / ||g|| = {:.1e}", nf_residual(&model, &theta, &g)?);
        }
        for cell in 0..g.n_cells {
            println!("  cell {cell}: {:?}", g.cell(cell).iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
        }
    }
    Ok(())
}
