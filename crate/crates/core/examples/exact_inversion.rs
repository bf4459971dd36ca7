//! Ridge inversion in the full f^N weight space followed by SVD compression;
//! prints train/test loss against the bond dimension for one training set.

use mpslab::datagen::{Target, TargetSpec};
use mpslab::dmrg::{data_loss, LossKind, TrainingData};
use mpslab::exact::ExactSolution;

fn main() -> mpslab::Result<()> {
    let ntr: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let spec = TargetSpec::default();
    let map = spec.feature_map();
    let target = Target::new(spec)?;
    let test_set = target.raw_dataset(1024, 1 << 40)?.normalized()?;
    let (mean, std) = (test_set.label_mean, test_set.label_std);
    let train_set = target.raw_dataset(ntr, 1000)?.normalized_with(mean, std)?;

    let train = TrainingData::from_dataset(&train_set, &map)?;
    let test = TrainingData::from_dataset(&test_set, &map)?;
    let solution = ExactSolution::fit(&train.batch, &train_set.labels, 1e-6)?;

    println!("N_tr = {ntr}");
    println!("{:>4} {:>12} {:>12}", "chi", "train", "test");
    for chi in [1, 2, 3, 4, 5, 6, 8, 12, 18, 27] {
        let w = solution.compress(chi)?.mps;
        let tr = data_loss(&w, &train, LossKind::Mse)?;
        let te = data_loss(&w, &test, LossKind::Mse)?;
        println!("{chi:>4} {tr:>12.4e} {te:>12.4e}");
    }
    Ok(())
}
