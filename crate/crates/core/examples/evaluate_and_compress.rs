//! Evaluate an MPS two ways (sweeping contraction vs. the full tensor) and
//! watch the SVD truncation error track the discarded singular weight.

use mpslab::datagen::{build_target_mps, TargetSpec};
use mpslab::{FeatureMap, Mps};

fn main() -> mpslab::Result<()> {
    let spec = TargetSpec::default();
    let target = build_target_mps(&spec)?;
    let map = FeatureMap::polynomial(spec.phys_dim)?;
    let x = [0.3, -1.2, 0.8, 0.05, 2.0, -0.7];
    let s = map.featurize(&x)?;

    let full = target.to_full_tensor()?;
    let by_sweep = target.evaluate(&s)?;
    let phi = s.to_full_tensor();
    let by_full: f64 = full.data().iter().zip(phi.data()).map(|(w, p)| w * p).sum();
    println!("bonds {:?}", target.bond_profile().dims);
    println!("f(x) sweep {by_sweep:.12e}  full {by_full:.12e}");

    println!("{:>4} {:>14} {:>14}", "chi", "rel. error", "discarded");
    let norm = full.frobenius_norm();
    for chi in [1, 2, 3, 5, 9, 27] {
        let c = Mps::compress(&full, chi, 0.0)?;
        let err = c
            .mps
            .to_full_tensor()?
            .axpby(1.0, &full, -1.0)?
            .frobenius_norm()
            / norm;
        println!(
            "{chi:>4} {err:>14.6e} {:>14.6e}",
            c.total_discarded().max(0.0).sqrt() / norm
        );
    }
    Ok(())
}
