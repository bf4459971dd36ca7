//! Replicated scans over bond dimension, training-set size, data complexity
//! and label noise, with aggregation and CSV/SVG/JSON output.
//!
//! Every (series, replicate) pair is an independent job. Jobs run on the
//! rayon pool and their results are merged in job order, so output is
//! identical for any thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ImageDataset};
use crate::datagen::{self, Dataset, Target, TargetSpec};
use crate::dmrg::{self, Checkpoint, LossKind, TrainConfig, TrainingData};
use crate::error::{Error, Result};
use crate::exact::ExactSolution;
use crate::feature_map::FeatureMap;

/// Fraction of jobs that must succeed for a scan to be reported.
pub const MIN_SUCCESS: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fig2,
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Fig7,
    Fig8,
    Fig9,
    Custom,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    /// Axis χ; one series per (N_tr, ε).
    Bond,
    /// Axis N_tr; one series per (χ, ε).
    TrainSize,
    /// Axis χ; one series per ε, reporting χ*(ε).
    Epsilon,
    /// Axis χ on images; one series per label-noise level.
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Inversion,
    Dmrg,
    Both,
}

impl Method {
    fn inversion(self) -> bool {
        matches!(self, Method::Inversion | Method::Both)
    }
    fn dmrg(self) -> bool {
        matches!(self, Method::Dmrg | Method::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Artificial,
    Mnist,
}

/// How regression labels are standardized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Every set by its own mean and standard deviation.
    PerSet,
    /// All sets by the statistics of the shared test set.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnistOptions {
    pub dir: Option<PathBuf>,
    pub downsample: usize,
    /// Number of test images used (all when absent).
    pub test_size: Option<usize>,
}

impl Default for MnistOptions {
    fn default() -> Self {
        Self {
            dir: None,
            downsample: 2,
            test_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub kind: ScanKind,
    pub data: DataSource,
    pub method: Method,
    /// `epsilon` is taken from `eps`.
    pub target: TargetSpec,
    pub ntr: Vec<usize>,
    pub eps: Vec<f64>,
    pub chi: Vec<usize>,
    pub noise: Vec<f64>,
    pub replicates: usize,
    /// Ridge coefficient of the inversion method.
    pub lambda: f64,
    /// Replicate `r` trains on samples drawn with seed `base_seed + r`.
    pub base_seed: u64,
    pub test_seed: u64,
    /// Replicate `r` validates on seed `val_seed + r`.
    pub val_seed: u64,
    pub test_size: usize,
    pub val_size: usize,
    pub normalization: Normalization,
    pub train: TrainConfig,
    pub mnist: MnistOptions,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Custom,
            kind: ScanKind::Bond,
            data: DataSource::Artificial,
            method: Method::Inversion,
            target: TargetSpec::default(),
            ntr: vec![300],
            eps: vec![0.3],
            chi: (2..=27).collect(),
            noise: vec![0.0],
            replicates: 8,
            lambda: 1e-6,
            base_seed: 1000,
            test_seed: 1 << 40,
            val_seed: 1 << 41,
            test_size: 1024,
            val_size: 1024,
            normalization: Normalization::Shared,
            train: TrainConfig::default(),
            mnist: MnistOptions::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Parameter grid of a figure. `full` selects the published replicate
    /// counts instead of the quick defaults.
    pub fn preset(scenario: Scenario, full: bool) -> Self {
        let base = Self {
            scenario,
            ..Self::default()
        };
        let reps = |published: usize| if full { published } else { 8 };
        let mnist_train = TrainConfig {
            sweeps: 100,
            cg_steps: 5,
            lambda: 0.0,
            loss_kind: LossKind::CrossEntropy,
            checkpoint: Checkpoint::Last,
            early_stop: None,
            ..TrainConfig::default()
        };
        let eps_wide: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        match scenario {
            Scenario::Fig2 => Self {
                ntr: (1..=16).map(|k| 50 * k).collect(),
                replicates: reps(100),
                ..base
            },
            Scenario::Fig3 => Self {
                kind: ScanKind::Epsilon,
                eps: vec![0.1, 0.2, 0.3],
                replicates: reps(100),
                ..base
            },
            Scenario::Fig4 => Self {
                method: Method::Both,
                eps: vec![0.1, 0.3],
                replicates: reps(32),
                ..base
            },
            Scenario::Fig6 => Self {
                method: Method::Both,
                eps: vec![1.0],
                replicates: reps(32),
                ..base
            },
            Scenario::Fig7 => Self {
                kind: ScanKind::Epsilon,
                eps: eps_wide,
                replicates: reps(100),
                ..base
            },
            Scenario::Fig8 => Self {
                kind: ScanKind::Epsilon,
                method: Method::Both,
                eps: eps_wide,
                replicates: reps(32),
                ..base
            },
            Scenario::Fig5 => Self {
                data: DataSource::Mnist,
                method: Method::Dmrg,
                ntr: vec![1024],
                chi: (2..=20).collect(),
                replicates: 1,
                train: mnist_train,
                ..base
            },
            Scenario::Fig9 => Self {
                kind: ScanKind::Noise,
                data: DataSource::Mnist,
                method: Method::Dmrg,
                ntr: vec![1024],
                chi: (2..=20).collect(),
                noise: vec![0.0, 0.1, 0.2],
                replicates: 1,
                train: mnist_train,
                ..base
            },
            Scenario::Custom => base,
        }
    }

    /// The image-size companion of the image bond scan: accuracy versus
    /// number of training images at χ = 6.
    pub fn mnist_trainsize(full: bool) -> Self {
        Self {
            kind: ScanKind::TrainSize,
            ntr: vec![128, 256, 512, 1024, 2048, 4096],
            chi: vec![6],
            ..Self::preset(Scenario::Fig5, full)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be ≥ 1");
        }
        if self.ntr.is_empty()
            || self.chi.is_empty()
            || self.eps.is_empty()
            || self.noise.is_empty()
        {
            return bad("ntr, chi, eps and noise lists must be non-empty");
        }
        if self.chi.contains(&0) || self.ntr.iter().any(|&n| n < 2) {
            return bad("χ must be ≥ 1 and N_tr ≥ 2");
        }
        if self.eps.iter().any(|&e| !(e > 0.0)) {
            return bad("ε must be > 0");
        }
        if self.noise.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("noise levels must lie in [0, 1]");
        }
        if !(self.lambda > 0.0) && self.method.inversion() && self.data == DataSource::Artificial {
            return bad("the inversion method needs λ > 0");
        }
        let train_seeds = self.base_seed..self.base_seed.saturating_add(self.replicates as u64);
        if train_seeds.contains(&self.test_seed) {
            return bad("test seed collides with a training seed");
        }
        let val_seeds = self.val_seed..self.val_seed.saturating_add(self.replicates as u64);
        if val_seeds
            .clone()
            .any(|s| train_seeds.contains(&s) || s == self.test_seed)
        {
            return bad("validation seeds collide with training or test seeds");
        }
        if self.data == DataSource::Mnist {
            if self.method != Method::Dmrg {
                return bad("image scans support only the dmrg method");
            }
            if self.mnist.dir.is_none() {
                return bad("image scans need mnist.dir");
            }
        } else if self.kind == ScanKind::Noise {
            return bad("noise scans need image data");
        }
        self.train.validate()?;
        self.target.validate()
    }

    fn axis_name(&self) -> &'static str {
        match self.kind {
            ScanKind::TrainSize => "ntr",
            _ => "chi",
        }
    }

    pub fn training_seed(&self, replicate: usize) -> u64 {
        self.base_seed + replicate as u64
    }
}

/// One replicate value at one axis point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub series: String,
    pub replicate: usize,
    pub seed: u64,
    pub axis: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub series: String,
    pub metric: String,
    pub axis: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single replicate.
    pub std: f64,
    pub n: usize,
}

impl SummaryRow {
    pub fn standard_error(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub dmrg_runs: usize,
    pub monotonicity_violations: usize,
    pub max_update_increase: f64,
    pub stalls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub axis: String,
    pub rows: Vec<RawRow>,
    pub summary: Vec<SummaryRow>,
    pub jobs: usize,
    pub failed: usize,
    pub diagnostics: Diagnostics,
}

impl ScanResult {
    /// Summary points of one series and metric, in axis order.
    pub fn curve(&self, series: &str, metric: &str) -> Vec<SummaryRow> {
        let mut c: Vec<SummaryRow> = self
            .summary
            .iter()
            .filter(|r| r.series == series && r.metric == metric)
            .cloned()
            .collect();
        c.sort_by(|a, b| a.axis.total_cmp(&b.axis));
        c
    }

    pub fn series(&self) -> Vec<String> {
        let mut s: Vec<String> = Vec::new();
        for r in &self.summary {
            if !s.contains(&r.series) {
                s.push(r.series.clone());
            }
        }
        s
    }

    pub fn metrics(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.summary {
            if !m.contains(&r.metric) {
                m.push(r.metric.clone());
            }
        }
        m
    }
}

/// Mean and sample standard deviation of each (series, metric, axis) group,
/// in order of first appearance.
pub fn summarize(rows: &[RawRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, String, u64), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.series.clone(), r.metric.clone(), r.axis.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                series: key.0,
                metric: key.1,
                axis: f64::from_bits(key.2),
                mean,
                std,
                n,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optimum {
    pub chi: usize,
    pub mean: f64,
    pub std: f64,
}

/// Argmin of the mean over the curve; ties go to the smaller axis value.
pub fn optimum_of(curve: &[SummaryRow]) -> Option<Optimum> {
    let mut best: Option<&SummaryRow> = None;
    for r in curve {
        if best.is_none_or(|b| r.mean < b.mean || (r.mean == b.mean && r.axis < b.axis)) {
            best = Some(r);
        }
    }
    best.map(|r| Optimum {
        chi: r.axis as usize,
        mean: r.mean,
        std: r.std,
    })
}

pub fn find_optimal_chi(scan: &ScanResult, series: &str, metric: &str) -> Option<Optimum> {
    optimum_of(&scan.curve(series, metric))
}

// ---------------------------------------------------------------------------
// Artificial data.

struct Prepared {
    spec: TargetSpec,
    target: Target,
    test: Dataset,
    map: FeatureMap,
}

fn prepare(cfg: &ExperimentConfig, epsilon: f64) -> Result<Prepared> {
    let spec = TargetSpec {
        epsilon,
        ..cfg.target.clone()
    };
    let target = Target::new(spec.clone())?;
    let test = target
        .raw_dataset(cfg.test_size, cfg.test_seed)?
        .normalized()?;
    Ok(Prepared {
        map: spec.feature_map(),
        spec,
        target,
        test,
    })
}

impl Prepared {
    fn draw(&self, cfg: &ExperimentConfig, samples: usize, seed: u64) -> Result<Dataset> {
        let raw = self.target.raw_dataset(samples, seed)?;
        match cfg.normalization {
            Normalization::PerSet => raw.normalized(),
            Normalization::Shared => raw.normalized_with(self.test.label_mean, self.test.label_std),
        }
    }
}

type JobOutput = (Vec<RawRow>, Diagnostics);

/// (N_tr, χ, axis value) of one point of a series.
type Point = (usize, usize, f64);

fn push(
    rows: &mut Vec<RawRow>,
    series: &str,
    r: usize,
    seed: u64,
    axis: f64,
    metric: &str,
    value: f64,
) {
    rows.push(RawRow {
        series: series.to_string(),
        replicate: r,
        seed,
        axis,
        metric: metric.to_string(),
        value,
    });
}

/// One replicate of an artificial-data series over a list of (N_tr, χ)
/// points sharing one ε.
fn artificial_job(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    series: &str,
    r: usize,
    points: &[Point],
) -> Result<JobOutput> {
    let seed = cfg.training_seed(r);
    let test = TrainingData::from_dataset(&prep.test, &prep.map)?;
    let mut by_ntr: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for &(ntr, chi, axis) in points {
        by_ntr.entry(ntr).or_default().push((chi, axis));
    }
    let mut rows = Vec::new();
    let mut diag = Diagnostics::default();
    for (ntr, chis) in by_ntr {
        let train_set = prep.draw(cfg, ntr, seed)?;
        let train = TrainingData::from_dataset(&train_set, &prep.map)?;
        let val = if cfg.method.dmrg() {
            let v = prep.draw(cfg, cfg.val_size, cfg.val_seed + r as u64)?;
            Some(TrainingData::from_dataset(&v, &prep.map)?)
        } else {
            None
        };
        let solution = ExactSolution::fit(&train.batch, &train_set.labels, cfg.lambda)?;
        let results: Vec<Result<JobOutput>> = chis
            .par_iter()
            .map(|&(chi, axis)| {
                let mut rows = Vec::new();
                let mut diag = Diagnostics::default();
                let w = solution.compress(chi)?.mps;
                if cfg.method.inversion() {
                    let tr = dmrg::data_loss(&w, &train, LossKind::Mse)?;
                    let te = dmrg::data_loss(&w, &test, LossKind::Mse)?;
                    push(&mut rows, series, r, seed, axis, "train_loss_inversion", tr);
                    push(&mut rows, series, r, seed, axis, "test_loss_inversion", te);
                }
                if cfg.method.dmrg() {
                    let (best, trace) =
                        dmrg::train(&w, &train, val.as_ref(), Some(&test), &cfg.train)?;
                    let rec = trace.returned_record();
                    push(
                        &mut rows,
                        series,
                        r,
                        seed,
                        axis,
                        "train_loss_dmrg",
                        dmrg::data_loss(&best, &train, LossKind::Mse)?,
                    );
                    push(
                        &mut rows,
                        series,
                        r,
                        seed,
                        axis,
                        "val_loss_dmrg",
                        rec.val_loss.unwrap_or(f64::NAN),
                    );
                    push(
                        &mut rows,
                        series,
                        r,
                        seed,
                        axis,
                        "test_loss_dmrg",
                        rec.test_loss.unwrap_or(f64::NAN),
                    );
                    diag.absorb(&trace);
                }
                Ok((rows, diag))
            })
            .collect();
        for res in results {
            let (r_rows, r_diag) = res?;
            rows.extend(r_rows);
            diag.merge(&r_diag);
        }
    }
    Ok((rows, diag))
}

impl Diagnostics {
    fn absorb(&mut self, trace: &dmrg::TrainTrace) {
        self.dmrg_runs += 1;
        self.monotonicity_violations += trace.monotonicity_violations;
        self.max_update_increase = self.max_update_increase.max(trace.max_update_increase);
        self.stalls += trace.stalls.len();
    }

    fn merge(&mut self, other: &Diagnostics) {
        self.dmrg_runs += other.dmrg_runs;
        self.monotonicity_violations += other.monotonicity_violations;
        self.max_update_increase = self.max_update_increase.max(other.max_update_increase);
        self.stalls += other.stalls;
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

/// Runs jobs in parallel, merges in job order and enforces the success rate.
fn collect(
    axis: &str,
    jobs: Vec<Box<dyn Fn() -> Result<JobOutput> + Send + Sync + '_>>,
) -> Result<ScanResult> {
    let total = jobs.len();
    let outputs: Vec<Result<JobOutput>> = jobs.par_iter().map(|job| job()).collect();
    let mut rows = Vec::new();
    let mut diagnostics = Diagnostics::default();
    let mut failed = 0;
    for out in outputs {
        match out {
            Ok((r, d)) => {
                rows.extend(r);
                diagnostics.merge(&d);
            }
            Err(e) => {
                log::warn!("replicate failed: {e}");
                failed += 1;
            }
        }
    }
    let succeeded = total - failed;
    if (succeeded as f64) < MIN_SUCCESS * total as f64 {
        return Err(Error::ScanAborted { succeeded, total });
    }
    Ok(ScanResult {
        axis: axis.to_string(),
        summary: summarize(&rows),
        rows,
        jobs: total,
        failed,
        diagnostics,
    })
}

fn run_artificial(cfg: &ExperimentConfig) -> Result<ScanResult> {
    let preps: Vec<Prepared> = cfg
        .eps
        .iter()
        .map(|&e| prepare(cfg, e))
        .collect::<Result<_>>()?;
    let mut jobs: Vec<Box<dyn Fn() -> Result<JobOutput> + Send + Sync + '_>> = Vec::new();
    for prep in &preps {
        let eps = prep.spec.epsilon;
        let series_list: Vec<(String, Vec<Point>)> = match cfg.kind {
            ScanKind::TrainSize => cfg
                .chi
                .iter()
                .map(|&chi| {
                    let pts = cfg.ntr.iter().map(|&n| (n, chi, n as f64)).collect();
                    (format!("chi={chi} eps={}", fmt_num(eps)), pts)
                })
                .collect(),
            _ => cfg
                .ntr
                .iter()
                .map(|&ntr| {
                    let pts = cfg.chi.iter().map(|&c| (ntr, c, c as f64)).collect();
                    (format!("ntr={ntr} eps={}", fmt_num(eps)), pts)
                })
                .collect(),
        };
        for (series, points) in series_list {
            for r in 0..cfg.replicates {
                let series = series.clone();
                let points = points.clone();
                jobs.push(Box::new(move || {
                    artificial_job(cfg, prep, &series, r, &points)
                }));
            }
        }
    }
    collect(cfg.axis_name(), jobs)
}

// ---------------------------------------------------------------------------
// Images.

struct ImageData {
    train: ImageDataset,
    test: ImageDataset,
}

fn load_images(cfg: &ExperimentConfig) -> Result<ImageData> {
    let dir = cfg
        .mnist
        .dir
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("mnist.dir not set".into()))?;
    let (ti, tl) = classifier::mnist_paths(dir, true)?;
    let (vi, vl) = classifier::mnist_paths(dir, false)?;
    let train = classifier::preprocess(&classifier::load_idx(ti, tl)?, cfg.mnist.downsample)?;
    let mut test = classifier::preprocess(&classifier::load_idx(vi, vl)?, cfg.mnist.downsample)?;
    if let Some(n) = cfg.mnist.test_size {
        test = test.take(n);
    }
    Ok(ImageData { train, test })
}

/// A seeded random subset of `count` training images.
fn subset(d: &ImageDataset, count: usize, seed: u64) -> Result<ImageDataset> {
    if count > d.len() {
        return Err(Error::InvalidArgument(format!(
            "{count} images requested, {} available",
            d.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, d.len(), count).into_vec();
    idx.sort_unstable();
    let n = d.pixels_per_image();
    let mut pixels = Vec::with_capacity(count * n);
    for &i in &idx {
        pixels.extend_from_slice(d.image(i));
    }
    ImageDataset::new(
        pixels,
        d.height,
        d.width,
        idx.iter().map(|&i| d.labels[i]).collect(),
        d.classes,
    )
}

/// Trains one image classifier and reports losses and accuracies.
fn image_point(
    cfg: &ExperimentConfig,
    train_set: &ImageDataset,
    test: &TrainingData,
    chi: usize,
    seed: u64,
) -> Result<(Vec<(&'static str, f64)>, dmrg::TrainTrace)> {
    let map = FeatureMap::trigonometric();
    let train = train_set.training_data(&map)?;
    let w0 = classifier::init_classifier(train.batch.sites(), train_set.classes, chi, seed)?;
    let (w, trace) = dmrg::train(&w0, &train, None, Some(test), &cfg.train)?;
    let labels = |d: &TrainingData| match &d.targets {
        dmrg::Targets::Classes { labels, .. } => labels.clone(),
        dmrg::Targets::Values(_) => Vec::new(),
    };
    let best_test = trace
        .records
        .iter()
        .filter_map(|r| r.test_loss)
        .fold(f64::INFINITY, f64::min);
    let metrics = vec![
        (
            "train_loss",
            dmrg::data_loss(&w, &train, cfg.train.loss_kind)?,
        ),
        ("test_loss", dmrg::data_loss(&w, test, cfg.train.loss_kind)?),
        ("best_test_loss", best_test),
        (
            "train_accuracy",
            classifier::accuracy_on(&w, &train.batch, &labels(&train))?,
        ),
        (
            "test_accuracy",
            classifier::accuracy_on(&w, &test.batch, &labels(test))?,
        ),
    ];
    Ok((metrics, trace))
}

fn run_images(cfg: &ExperimentConfig) -> Result<ScanResult> {
    let data = load_images(cfg)?;
    let map = FeatureMap::trigonometric();
    let test = data.test.training_data(&map)?;
    let (data, test) = (&data, &test);
    let mut jobs: Vec<Box<dyn Fn() -> Result<JobOutput> + Send + Sync + '_>> = Vec::new();
    // (series, noise, points (ntr, chi, axis))
    let mut series_list: Vec<(String, f64, Vec<Point>)> = Vec::new();
    match cfg.kind {
        ScanKind::TrainSize => {
            for &chi in &cfg.chi {
                let pts = cfg.ntr.iter().map(|&n| (n, chi, n as f64)).collect();
                series_list.push((format!("chi={chi}"), cfg.noise[0], pts));
            }
        }
        ScanKind::Noise => {
            for &p in &cfg.noise {
                let pts = cfg.chi.iter().map(|&c| (cfg.ntr[0], c, c as f64)).collect();
                series_list.push((format!("noise={}", fmt_num(p)), p, pts));
            }
        }
        _ => {
            for &ntr in &cfg.ntr {
                let pts = cfg.chi.iter().map(|&c| (ntr, c, c as f64)).collect();
                series_list.push((format!("ntr={ntr}"), cfg.noise[0], pts));
            }
        }
    }
    for (series, noise, points) in series_list {
        for r in 0..cfg.replicates {
            for &(ntr, chi, axis) in &points {
                let series = series.clone();
                jobs.push(Box::new(move || {
                    let seed = cfg.training_seed(r);
                    let mut set = subset(&data.train, ntr, seed)?;
                    if noise > 0.0 {
                        let noisy =
                            datagen::add_label_noise(&set.labels, noise, set.classes, seed)?;
                        set = set.with_labels(noisy)?;
                    }
                    let (metrics, trace) = image_point(cfg, &set, test, chi, seed)?;
                    let mut rows = Vec::new();
                    for (m, v) in metrics {
                        push(&mut rows, &series, r, seed, axis, m, v);
                    }
                    let mut diag = Diagnostics::default();
                    diag.absorb(&trace);
                    Ok((rows, diag))
                }));
            }
        }
    }
    collect(cfg.axis_name(), jobs)
}

/// Runs the scan described by `cfg`.
pub fn run_scan(cfg: &ExperimentConfig) -> Result<ScanResult> {
    cfg.validate()?;
    match cfg.data {
        DataSource::Artificial => run_artificial(cfg),
        DataSource::Mnist => run_images(cfg),
    }
}

pub fn run_bond_scan(cfg: &ExperimentConfig) -> Result<ScanResult> {
    run_scan(&ExperimentConfig {
        kind: ScanKind::Bond,
        ..cfg.clone()
    })
}

pub fn run_trainsize_scan(cfg: &ExperimentConfig) -> Result<ScanResult> {
    run_scan(&ExperimentConfig {
        kind: ScanKind::TrainSize,
        ..cfg.clone()
    })
}

pub fn run_epsilon_scan(cfg: &ExperimentConfig) -> Result<ScanResult> {
    run_scan(&ExperimentConfig {
        kind: ScanKind::Epsilon,
        ..cfg.clone()
    })
}

pub fn run_noise_scan(cfg: &ExperimentConfig) -> Result<ScanResult> {
    run_scan(&ExperimentConfig {
        kind: ScanKind::Noise,
        data: DataSource::Mnist,
        ..cfg.clone()
    })
}

// ---------------------------------------------------------------------------
// Output.

/// Everything needed to rerun a scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub training_seeds: Vec<u64>,
    pub validation_seeds: Vec<u64>,
    pub test_seed: u64,
    pub target_seed: u64,
    pub jobs: usize,
    pub failed: usize,
    pub diagnostics: Diagnostics,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, scan: &ScanResult) -> Self {
        let reps = 0..cfg.replicates;
        Self {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            training_seeds: reps.clone().map(|r| cfg.training_seed(r)).collect(),
            validation_seeds: reps.map(|r| cfg.val_seed + r as u64).collect(),
            test_seed: cfg.test_seed,
            target_seed: cfg.target.seed,
            jobs: scan.jobs,
            failed: scan.failed,
            diagnostics: scan.diagnostics.clone(),
        }
    }
}

/// Reads a configuration from JSON: either a bare config or a manifest.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let inner = value.get("config").cloned().unwrap_or(value);
    Ok(serde_json::from_value(inner)?)
}

pub fn write_raw_csv(scan: &ScanResult, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "replicate", "seed", &scan.axis, "metric", "value"])?;
    for r in &scan.rows {
        w.write_record([
            r.series.clone(),
            r.replicate.to_string(),
            r.seed.to_string(),
            fmt_num(r.axis),
            r.metric.clone(),
            format!("{:.16e}", r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(scan: &ScanResult, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "metric", "axis", "mean", "std", "n"])?;
    for r in &scan.summary {
        w.write_record([
            r.series.clone(),
            r.metric.clone(),
            fmt_num(r.axis),
            format!("{:.16e}", r.mean),
            format!("{:.16e}", r.std),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// χ* per series for every test metric of a χ scan.
pub fn optima(scan: &ScanResult) -> Vec<(String, String, Optimum)> {
    let mut out = Vec::new();
    if scan.axis != "chi" {
        return out;
    }
    for m in scan.metrics().iter().filter(|m| m.starts_with("test_loss")) {
        for s in scan.series() {
            if let Some(o) = find_optimal_chi(scan, &s, m) {
                out.push((s, m.clone(), o));
            }
        }
    }
    out
}

/// Writes `raw.csv`, `summary.csv`, `optimum.csv` (χ scans), `figure.svg`
/// and `manifest.json` into `dir`.
pub fn emit_outputs(
    scan: &ScanResult,
    cfg: &ExperimentConfig,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_raw_csv(scan, fs::File::create(dir.join("raw.csv"))?)?;
    write_summary_csv(scan, fs::File::create(dir.join("summary.csv"))?)?;
    let opt = optima(scan);
    if !opt.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("optimum.csv"))?;
        w.write_record(["series", "metric", "chi_star", "mean", "std"])?;
        for (s, m, o) in opt {
            w.write_record([
                s,
                m,
                o.chi.to_string(),
                format!("{:.16e}", o.mean),
                format!("{:.16e}", o.std),
            ])?;
        }
        w.flush()?;
    }
    let metric = primary_metric(scan);
    fs::write(dir.join("figure.svg"), render_svg(scan, &metric))?;
    let manifest = Manifest::new(cfg, scan);
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

fn primary_metric(scan: &ScanResult) -> String {
    let metrics = scan.metrics();
    for pref in [
        "test_accuracy",
        "test_loss_dmrg",
        "test_loss_inversion",
        "test_loss",
    ] {
        if metrics.iter().any(|m| m == pref) {
            return pref.to_string();
        }
    }
    metrics.first().cloned().unwrap_or_default()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line plot of `metric` against the scan axis, one polyline per series with
/// a shaded ±σ band. Uses a log y axis when all values are positive and span
/// more than two decades.
pub fn render_svg(scan: &ScanResult, metric: &str) -> String {
    let (w, h) = (720.0, 480.0);
    let (ml, mr, mt, mb) = (80.0, 200.0, 30.0, 60.0);
    let curves: Vec<(String, Vec<SummaryRow>)> = scan
        .series()
        .into_iter()
        .map(|s| {
            let c = scan.curve(&s, metric);
            (s, c)
        })
        .filter(|(_, c)| !c.is_empty())
        .collect();
    let pts = curves.iter().flat_map(|(_, c)| c.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in pts {
        if !p.mean.is_finite() {
            continue;
        }
        x0 = x0.min(p.axis);
        x1 = x1.max(p.axis);
        y0 = y0.min(p.mean - p.std);
        y1 = y1.max(p.mean + p.std);
    }
    let positive = curves
        .iter()
        .flat_map(|(_, c)| c.iter())
        .all(|p| p.mean > 0.0);
    let lo_pos = curves
        .iter()
        .flat_map(|(_, c)| c.iter())
        .map(|p| {
            if p.mean - p.std > 0.0 {
                p.mean - p.std
            } else {
                p.mean
            }
        })
        .fold(f64::INFINITY, f64::min);
    let log_y = positive && y1 / lo_pos > 100.0;
    if log_y {
        y0 = lo_pos;
    }
    if !(x1 > x0) {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let ty = |v: f64| if log_y { v.max(y0).log10() } else { v };
    let (ty0, ty1) = (ty(y0), ty(y1));
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (ty(y) - ty0) / (ty1 - ty0) * (h - mt - mb);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    );
    for k in 0..=5 {
        let xv = x0 + (x1 - x0) * k as f64 / 5.0;
        let x = px(xv);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            h - mb,
            h - mb + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            h - mb + 20.0,
            trim_num(xv)
        );
        let tv = ty0 + (ty1 - ty0) * k as f64 / 5.0;
        let yv = if log_y { 10f64.powf(tv) } else { tv };
        let y = py(yv);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{ml}" y2="{y:.2}" stroke="black"/>"#,
            ml - 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            ml - 8.0,
            y + 4.0,
            trim_num(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (ml + w - mr) / 2.0,
        h - 15.0,
        xml_escape(&scan.axis)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        xml_escape(metric),
        if log_y { " (log)" } else { "" }
    );
    for (k, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let finite: Vec<&SummaryRow> = c.iter().filter(|p| p.mean.is_finite()).collect();
        let upper: Vec<String> = finite
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.axis), py(p.mean + p.std)))
            .collect();
        let lower: Vec<String> = finite
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", px(p.axis), py(p.mean - p.std)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = finite
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.axis), py(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let ly = mt + 15.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            w - mr + 10.0,
            w - mr + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            w - mr + 35.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trim_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        let t = format!("{v:.3}");
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
