//! Sample regression data from the random target MPS at a few complexity
//! levels ε and show how the label spread grows with ε.

use mpslab::datagen::{Target, TargetSpec};

fn main() -> mpslab::Result<()> {
    println!("{:>5} {:>12} {:>12}", "eps", "label mean", "label std");
    for eps in [0.1, 0.2, 0.3, 0.5, 1.0] {
        let target = Target::new(TargetSpec {
            epsilon: eps,
            ..TargetSpec::default()
        })?;
        let raw = target.raw_dataset(1024, 7)?;
        let (mean, std) = raw.label_stats();
        println!("{eps:>5} {mean:>12.4e} {std:>12.4e}");
    }

    // Normalized data as written by `mpslab gen`.
    let d = Target::new(TargetSpec::default())?.dataset(5, 7)?;
    let mut out = Vec::new();
    d.write_csv(&mut out)?;
    print!("{}", String::from_utf8_lossy(&out));
    Ok(())
}
