//! Simulated drift of the orthogonal moment under local alternatives against
//! the predicted slope.
//!
//! `cargo run --release --example drift_check`

use orthomom::dataset::PlmDgp;
use orthomom::diagnostics::{drift_check, PlmLocal};

fn main() -> orthomom::Result<()> {
    let local = PlmLocal::new(PlmDgp::default(), 200_000, 4)?;
    for delta in [0.0, 1.0, 2.0] {
        let r = drift_check(&local, delta, 400, 500, 4)?;
        println!(
            "delta {delta}: drift {:.4} (mc se {:.4}) predicted {:.4}  variance {:.4} vs {:.4}  ok {}",
            r.empirical_drift, r.mc_se, r.predicted_drift, r.empirical_variance, r.predicted_variance, r.within_tolerance
        );
    }
    Ok(())
}
