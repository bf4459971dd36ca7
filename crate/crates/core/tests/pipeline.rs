//! End-to-end behaviour: data generation through fitting, scan outputs,
//! image scans on small synthetic IDX files, and the command-line tool.

use std::fs;
use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpslab::classifier::{self, ImageDataset};
use mpslab::datagen::{Target, TargetSpec};
use mpslab::dmrg::{self, LossKind, TrainingData};
use mpslab::exact::ExactSolution;
use mpslab::experiments::{self, DataSource, ExperimentConfig, Method, ScanKind};
use mpslab::{Error, FeatureMap, Mps};

#[test]
fn labels_have_degree_below_f_in_every_variable() {
    // The f-th forward difference in one variable of a polynomial of degree
    // ≤ f − 1 vanishes.
    let spec = TargetSpec {
        sites: 3,
        chi: 9,
        ..TargetSpec::default()
    };
    let target = Target::new(spec.clone()).unwrap();
    let map = spec.feature_map();
    let f = spec.phys_dim;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for var in 0..spec.sites {
        let base: Vec<f64> = (0..spec.sites).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = 0.5;
        let mut diff = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..=f {
            let mut x = base.clone();
            x[var] += k as f64 * h;
            let y = target.mps.evaluate(&map.featurize(&x).unwrap()).unwrap();
            let binom = (0..k).fold(1.0, |acc, i| acc * (f - i) as f64 / (i + 1) as f64);
            let sign = if (f - k).is_multiple_of(2) { 1.0 } else { -1.0 };
            diff += sign * binom * y;
            scale = scale.max(y.abs());
        }
        assert!(
            diff.abs() <= 1e-8 * scale.max(1.0),
            "variable {var}: {diff}"
        );
    }
}

#[test]
fn compressed_target_reproduces_raw_labels() {
    let spec = TargetSpec::default();
    let target = Target::new(spec.clone()).unwrap();
    let raw = target.raw_dataset(200, 5).unwrap();
    let w = Mps::compress(&target.mps.to_full_tensor().unwrap(), 27, 0.0)
        .unwrap()
        .mps;
    let out = w
        .evaluate_batch(&raw.featurize(&spec.feature_map()).unwrap())
        .unwrap();
    for (a, b) in out.iter().zip(&raw.labels) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn full_data_inversion_fits_training_labels() {
    let spec = TargetSpec::default();
    let d = Target::new(spec.clone()).unwrap().dataset(760, 8).unwrap();
    let data = TrainingData::from_dataset(&d, &spec.feature_map()).unwrap();
    let w = ExactSolution::fit(&data.batch, &d.labels, 1e-6)
        .unwrap()
        .compress(27)
        .unwrap()
        .mps;
    assert!(dmrg::mean_squared_error(&w, &data).unwrap() <= 1e-6);
}

#[test]
fn inversion_test_loss_keeps_falling_beyond_full_rank() {
    let cfg = ExperimentConfig {
        kind: ScanKind::TrainSize,
        ntr: vec![750, 1500, 3000],
        chi: vec![27],
        replicates: 4,
        ..ExperimentConfig::default()
    };
    let scan = experiments::run_trainsize_scan(&cfg).unwrap();
    let curve = scan.curve("chi=27 eps=0.3", "test_loss_inversion");
    assert_eq!(curve.len(), 3);
    for p in curve.windows(2) {
        assert!(p[1].mean <= p[0].mean + p[0].standard_error(), "{:?}", p);
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn scan_outputs_are_complete_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: Method::Both,
        ntr: vec![150],
        chi: vec![2, 3, 4],
        replicates: 3,
        train: dmrg::TrainConfig {
            sweeps: 3,
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    let scan = experiments::run_bond_scan(&cfg).unwrap();
    experiments::emit_outputs(&scan, &cfg, dir.path()).unwrap();

    let raw = read_csv(&dir.path().join("raw.csv"));
    let metrics = scan.metrics();
    assert_eq!(metrics.len(), 5);
    assert_eq!(raw.len(), cfg.chi.len() * cfg.replicates * metrics.len());
    for row in &raw {
        let rep: u64 = row[1].parse().unwrap();
        assert_eq!(row[2].parse::<u64>().unwrap(), cfg.base_seed + rep);
    }

    // Summary recomputed from the written raw values.
    let summary = read_csv(&dir.path().join("summary.csv"));
    assert_eq!(summary.len(), cfg.chi.len() * metrics.len());
    for s in &summary {
        let vals: Vec<f64> = raw
            .iter()
            .filter(|r| r[0] == s[0] && r[4] == s[1] && r[3] == s[2])
            .map(|r| r[5].parse().unwrap())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let (m, sd): (f64, f64) = (s[3].parse().unwrap(), s[4].parse().unwrap());
        assert!((m - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((sd - std).abs() <= 1e-12 * std.abs().max(1.0));
        assert_eq!(s[5], "3");
    }

    let optimum = read_csv(&dir.path().join("optimum.csv"));
    assert_eq!(optimum.len(), 2);

    let svg = fs::read_to_string(dir.path().join("figure.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.has_tag_name("polyline")));

    let back = experiments::load_config(dir.path().join("manifest.json")).unwrap();
    assert_eq!(back, cfg);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest["training_seeds"],
        serde_json::json!([1000, 1001, 1002])
    );
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn unwritable_output_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = ExperimentConfig {
        replicates: 1,
        ntr: vec![50],
        chi: vec![2],
        ..ExperimentConfig::default()
    };
    let scan = experiments::run_bond_scan(&cfg).unwrap();
    assert!(matches!(
        experiments::emit_outputs(&scan, &cfg, blocker.join("out")),
        Err(Error::Io(_))
    ));
}

/// 8×8 stripe images in four classes, written as MNIST-named IDX files.
fn synthetic_mnist(dir: &Path) {
    let make = |count: usize, seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (mut pixels, mut labels) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let class: usize = r.random_range(0..4);
            for k in 0..64 {
                let (row, col) = (k / 8, k % 8);
                let on = if class < 2 {
                    row / 2 == class + 1
                } else {
                    col / 2 == class - 1
                };
                let base: f64 = if on { 0.85 } else { 0.15 };
                pixels.push(base + r.random_range(-0.1..0.1));
            }
            labels.push(class);
        }
        ImageDataset::new(pixels, 8, 8, labels, 10).unwrap()
    };
    classifier::write_idx(
        &make(200, 1),
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    classifier::write_idx(
        &make(100, 2),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
}

fn image_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(experiments::Scenario::Fig5, false);
    cfg.mnist.dir = Some(dir.to_path_buf());
    cfg.ntr = vec![120];
    cfg.chi = vec![2, 4];
    cfg.train.sweeps = 3;
    cfg
}

#[test]
fn image_bond_scan_reports_accuracy_and_loss() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_mnist(dir.path());
    let cfg = image_config(dir.path());
    assert_eq!(cfg.data, DataSource::Mnist);
    let scan = experiments::run_scan(&cfg).unwrap();
    let acc = scan.curve("ntr=120", "train_accuracy");
    assert_eq!(acc.len(), 2);
    assert!(acc.iter().all(|p| (0.0..=1.0).contains(&p.mean)));
    assert!(scan.curve("ntr=120", "test_accuracy").last().unwrap().mean >= 0.9);
    assert_eq!(scan.diagnostics.monotonicity_violations, 0);
}

#[test]
fn image_noise_and_trainsize_scans() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_mnist(dir.path());
    let mut cfg = image_config(dir.path());
    cfg.noise = vec![0.0, 0.2];
    cfg.chi = vec![3];
    let scan = experiments::run_noise_scan(&cfg).unwrap();
    assert_eq!(
        scan.series(),
        vec!["noise=0".to_string(), "noise=0.2".to_string()]
    );

    let mut cfg = image_config(dir.path());
    cfg.ntr = vec![40, 160];
    cfg.chi = vec![3];
    let scan = experiments::run_trainsize_scan(&cfg).unwrap();
    assert_eq!(scan.axis, "ntr");
    let test = scan.curve("chi=3", "test_accuracy");
    assert!(test[1].mean >= test[0].mean);
}

#[test]
fn scans_abort_when_too_many_jobs_fail() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_mnist(dir.path());
    let mut cfg = image_config(dir.path());
    // 150 images fit in the 200-image training file, 500 do not: one of two
    // jobs fails, below the required success rate.
    cfg.ntr = vec![150, 500];
    cfg.kind = ScanKind::TrainSize;
    cfg.chi = vec![2];
    cfg.train.sweeps = 1;
    match experiments::run_scan(&cfg) {
        Err(Error::ScanAborted { succeeded, total }) => assert_eq!((succeeded, total), (1, 2)),
        other => panic!("expected an aborted scan, got {other:?}"),
    }
}

#[test]
fn unrelated_model_scores_near_chance() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (t, sites) = (4000, 6);
    let x: Vec<f64> = (0..t * sites).map(|_| r.random()).collect();
    let y: Vec<usize> = (0..t).map(|_| r.random_range(0..10)).collect();
    let batch = FeatureMap::trigonometric()
        .featurize_batch(&x, sites)
        .unwrap();
    let w = classifier::init_classifier(sites, 10, 4, 9).unwrap();
    let acc = classifier::accuracy_on(&w, &batch, &y).unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
    let data = TrainingData::classification(batch, y, 10).unwrap();
    assert!(dmrg::data_loss(&w, &data, LossKind::CrossEntropy).unwrap() > 0.0);
}

fn mpslab(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mpslab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    let text =
        String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

#[test]
fn command_line_round_trip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        mpslab(&["gen", "--samples", "200", "--out", "train.csv"], d).0,
        0
    );
    assert_eq!(
        mpslab(
            &[
                "gen",
                "--samples",
                "300",
                "--seed",
                "77",
                "--out",
                "test.csv"
            ],
            d
        )
        .0,
        0
    );
    let (code, text) = mpslab(
        &[
            "exact",
            "--train",
            "train.csv",
            "--test",
            "test.csv",
            "--chi",
            "3",
            "--out",
            "w.mps",
        ],
        d,
    );
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("test loss"));
    let (code, text) = mpslab(
        &[
            "dmrg",
            "--train",
            "train.csv",
            "--val",
            "test.csv",
            "--init",
            "w.mps",
            "--sweeps",
            "2",
            "--trace",
            "t.csv",
        ],
        d,
    );
    assert_eq!(code, 0, "{text}");
    assert_eq!(read_csv(&d.join("t.csv")).len(), 3);

    let (code, text) = mpslab(
        &[
            "scan",
            "--chi",
            "2..3",
            "--ntr",
            "60",
            "--replicates",
            "2",
            "--out",
            "s",
        ],
        d,
    );
    assert_eq!(code, 0, "{text}");
    assert!(d.join("s/raw.csv").exists());

    assert_eq!(mpslab(&["scan", "--chi", "4..2"], d).0, 2);
    assert_eq!(mpslab(&["scan", "--replicates", "0"], d).0, 2);
    assert_eq!(mpslab(&["scan", "--scenario", "fig42"], d).0, 2);
    assert_eq!(
        mpslab(&["scan", "--scenario", "fig5"], d).0,
        2,
        "image scan without a data directory"
    );

    // Constant labels cannot be standardized.
    assert_eq!(
        mpslab(
            &[
                "scan",
                "--eps",
                "1e-300",
                "--ntr",
                "10",
                "--chi",
                "2",
                "--replicates",
                "2",
                "--out",
                "a"
            ],
            d
        )
        .0,
        2
    );

    synthetic_mnist(d);
    let dir_arg = d.to_str().unwrap();
    let args = [
        "scan",
        "--scenario",
        "fig5",
        "--mnist-dir",
        dir_arg,
        "--kind",
        "trainsize",
        "--ntr",
        "150,500",
        "--chi",
        "2",
        "--sweeps",
        "1",
        "--out",
        "m",
    ];
    assert_eq!(mpslab(&args, d).0, 3, "aborted scan");
}
