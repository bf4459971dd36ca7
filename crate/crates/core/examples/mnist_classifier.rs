//! Train a labeled MPS classifier with cross-entropy sweeps.
//!
//! Usage: `mnist_classifier [MNIST_DIR] [chi]`. Without a directory a small
//! synthetic stripe dataset is written to IDX files and used instead, so the
//! whole ingestion path is still exercised.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpslab::classifier::{self, ImageDataset};
use mpslab::dmrg::{self, Checkpoint, LossKind, TrainConfig};
use mpslab::FeatureMap;

/// 8×8 images of one bright horizontal or vertical stripe; class = stripe
/// position (0..4 rows, 4..8 columns, in pairs).
fn stripes(count: usize, seed: u64) -> mpslab::Result<ImageDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let class = rng.random_range(0..4);
        let mut img = [0.0f64; 64];
        for (k, p) in img.iter_mut().enumerate() {
            let (r, c) = (k / 8, k % 8);
            let on = match class {
                0 => r / 2 == 1,
                1 => r / 2 == 2,
                2 => c / 2 == 1,
                _ => c / 2 == 2,
            };
            *p = if on { 0.9 } else { 0.1 } + rng.random_range(-0.1..0.1);
        }
        pixels.extend(img);
        labels.push(class);
    }
    ImageDataset::new(pixels, 8, 8, labels, 4)
}

fn main() -> mpslab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let chi: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let _tmp;
    let dir = match args.first() {
        Some(d) => PathBuf::from(d),
        None => {
            let tmp = tempfile::tempdir()?;
            let d = tmp.path().to_path_buf();
            classifier::write_idx(
                &stripes(256, 1)?,
                d.join("train-images-idx3-ubyte"),
                d.join("train-labels-idx1-ubyte"),
            )?;
            classifier::write_idx(
                &stripes(256, 2)?,
                d.join("t10k-images-idx3-ubyte"),
                d.join("t10k-labels-idx1-ubyte"),
            )?;
            _tmp = tmp;
            d
        }
    };

    let (ti, tl) = classifier::mnist_paths(&dir, true)?;
    let (vi, vl) = classifier::mnist_paths(&dir, false)?;
    let train = classifier::preprocess(&classifier::load_idx(ti, tl)?, 2)?.take(1024);
    let test = classifier::preprocess(&classifier::load_idx(vi, vl)?, 2)?.take(2000);
    println!(
        "{} train / {} test images, {}×{} after pooling",
        train.len(),
        test.len(),
        train.height,
        train.width
    );

    let map = FeatureMap::trigonometric();
    let train_data = train.training_data(&map)?;
    let test_data = test.training_data(&map)?;
    let w0 = classifier::init_classifier(train_data.batch.sites(), train.classes, chi, 3)?;
    let cfg = TrainConfig {
        sweeps: 10,
        cg_steps: 5,
        lambda: 0.0,
        loss_kind: LossKind::CrossEntropy,
        checkpoint: Checkpoint::Last,
        early_stop: None,
        ..TrainConfig::default()
    };
    let (w, trace) = dmrg::train(&w0, &train_data, None, Some(&test_data), &cfg)?;
    for r in &trace.records {
        println!(
            "sweep {:>3}  train CE {:.4e}  test CE {:.4e}",
            r.sweep,
            r.train_loss,
            r.test_loss.unwrap_or(f64::NAN)
        );
    }
    println!(
        "train accuracy {:.4}",
        classifier::accuracy(&w, &train, &map)?
    );
    println!(
        "test accuracy  {:.4}",
        classifier::accuracy(&w, &test, &map)?
    );
    let p = classifier::predict_proba(&w, &test.featurize(&map)?.get(0))?;
    println!(
        "first test image: label {} predicted {} p = {:.3?}",
        test.labels[0],
        p.argmax(),
        p.p
    );
    Ok(())
}
