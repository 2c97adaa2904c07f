//! Test, estimate and invert a heterogeneous-effect coefficient.
//!
//! `cargo run --example hte_inference`

use orthomom::dataset::HteDgp;
use orthomom::hte::{hte_estimate, hte_test, HteConfig};
use orthomom::{DgpSpec, Family};

fn main() -> orthomom::Result<()> {
    let dgp = HteDgp::default();
    let data = DgpSpec::new(Family::Hte(dgp.clone()), 2000, 11).generate()?;
    for l in [0, 1] {
        let cfg = HteConfig { l, null: 0.0, seed: 11, ..HteConfig::default() };
        let t = hte_test(&data, &cfg)?;
        let e = hte_estimate(&data, &cfg)?;
        println!(
            "x{}: truth {:.2}  test of 0: stat {:.2}, p = {:.4}, reject {}  estimate {:.4} (se {:.4})  ci {:?}",
            l + 1,
            dgp.eta04[l],
            t.statistic,
            t.p_value,
            t.reject,
            e.eta4_hat,
            e.se,
            e.ci
        );
    }
    Ok(())
}
