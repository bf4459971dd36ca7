//! Start from the compressed inversion at a small bond dimension and refine
//! it with sweeps, checkpointing on a validation set.

use mpslab::datagen::{Target, TargetSpec};
use mpslab::dmrg::{self, LossKind, TrainConfig, TrainingData};
use mpslab::exact::ExactSolution;

fn main() -> mpslab::Result<()> {
    let chi = 4;
    let spec = TargetSpec::default();
    let map = spec.feature_map();
    let target = Target::new(spec)?;
    let test_set = target.raw_dataset(1024, 1 << 40)?.normalized()?;
    let norm = |n, seed| {
        target
            .raw_dataset(n, seed)?
            .normalized_with(test_set.label_mean, test_set.label_std)
    };
    let train_set = norm(300, 1000)?;
    let val_set = norm(1024, 1 << 41)?;

    let train = TrainingData::from_dataset(&train_set, &map)?;
    let val = TrainingData::from_dataset(&val_set, &map)?;
    let test = TrainingData::from_dataset(&test_set, &map)?;

    let w0 = ExactSolution::fit(&train.batch, &train_set.labels, 1e-6)?
        .compress(chi)?
        .mps;
    let (w, trace) = dmrg::train(
        &w0,
        &train,
        Some(&val),
        Some(&test),
        &TrainConfig::default(),
    )?;

    println!(
        "{:>5} {:>12} {:>12} {:>12}",
        "sweep", "train", "val", "test"
    );
    for r in &trace.records {
        println!(
            "{:>5} {:>12.4e} {:>12.4e} {:>12.4e}",
            r.sweep,
            r.train_loss,
            r.val_loss.unwrap_or(f64::NAN),
            r.test_loss.unwrap_or(f64::NAN)
        );
    }
    println!("returned sweep {} (best validation)", trace.returned_sweep);
    println!(
        "inversion test loss {:.4e}",
        dmrg::data_loss(&w0, &test, LossKind::Mse)?
    );
    println!(
        "trained   test loss {:.4e}",
        dmrg::data_loss(&w, &test, LossKind::Mse)?
    );
    println!("monotonicity violations {}", trace.monotonicity_violations);
    Ok(())
}
