//! Command-line front end: data generation, single fits and replicated scans.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 aborted scan.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpslab::classifier;
use mpslab::datagen::{Conjugation, Dataset, Target, TargetSpec};
use mpslab::dmrg::{self, Checkpoint, LossKind, TrainConfig, TrainingData};
use mpslab::exact::ExactSolution;
use mpslab::experiments::{self, DataSource, ExperimentConfig, Method, ScanKind, Scenario};
use mpslab::{Error, FeatureMap, Mps, Result};

#[derive(Parser)]
#[command(
    name = "mpslab",
    version,
    about = "Matrix product state regression and classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a random target MPS and write it as CSV.
    Gen(GenArgs),
    /// Ridge inversion in the full weight space, compressed to bond χ.
    Exact(FitArgs),
    /// Sweep-based training of an MPS regressor.
    Dmrg(DmrgArgs),
    /// Train an MPS classifier on MNIST IDX files.
    Mnist(MnistArgs),
    /// Replicated scans over χ, N_tr, ε or label noise.
    Scan(ScanArgs),
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long, default_value_t = 6)]
    sites: usize,
    #[arg(long, default_value_t = 3)]
    phys: usize,
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    /// Bond dimension of the target.
    #[arg(long, default_value_t = 27)]
    target_chi: usize,
    /// Seed of the target itself (not of the samples).
    #[arg(long, default_value_t = 1)]
    target_seed: u64,
    /// Use one shared rotation instead of one per site.
    #[arg(long)]
    shared_rotation: bool,
}

impl TargetArgs {
    fn spec(&self) -> TargetSpec {
        TargetSpec {
            sites: self.sites,
            phys_dim: self.phys,
            epsilon: self.eps,
            chi: self.target_chi,
            conjugation: if self.shared_rotation {
                Conjugation::Shared
            } else {
                Conjugation::PerSite
            },
            seed: self.target_seed,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 300)]
    samples: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// Write unnormalized labels.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the target MPS.
    #[arg(long)]
    target_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV with columns x1..xN,y.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Polynomial feature dimension f.
    #[arg(long, default_value_t = 3)]
    phys: usize,
    #[arg(long, default_value_t = 27)]
    chi: usize,
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
    /// Write the fitted MPS here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DmrgArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Start from this MPS instead of the compressed inversion.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    sweeps: usize,
    #[arg(long, default_value_t = 5)]
    cg_steps: usize,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct MnistArgs {
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 1024)]
    ntr: usize,
    #[arg(long, default_value_t = 6)]
    chi: usize,
    #[arg(long, default_value_t = 100)]
    sweeps: usize,
    #[arg(long, default_value_t = 5)]
    cg_steps: usize,
    #[arg(long, default_value_t = 2)]
    downsample: usize,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long, default_value = "custom")]
    scenario: Scenario,
    /// JSON config or manifest; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of replicate 0; replicate r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// χ values: `2..27`, `2:27:5` or `2,3,5`.
    #[arg(long)]
    chi: Option<String>,
    /// Training sizes, same syntax as --chi.
    #[arg(long)]
    ntr: Option<String>,
    /// Comma-separated ε values.
    #[arg(long)]
    eps: Option<String>,
    /// Comma-separated label-noise fractions.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long, value_parser = ["bond", "trainsize", "epsilon", "noise"])]
    kind: Option<String>,
    #[arg(long, value_parser = ["inversion", "dmrg", "both"])]
    method: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Published replicate counts instead of the quick defaults.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Parses `a..b` (inclusive), `a:b:step` or a comma list.
fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| invalid(format!("bad integer {t:?} in {s:?}")))
    };
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        return if a <= b {
            Ok((a..=b).collect())
        } else {
            Err(invalid(format!("empty range {s:?}")))
        };
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step == 0 || a > b {
            return Err(invalid(format!("bad range {s:?}")));
        }
        return Ok((a..=b).step_by(step).collect());
    }
    s.split(',').map(num).collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("bad number {t:?} in {s:?}")))
        })
        .collect()
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(File::open(path)?)
}

fn write_mps(w: &Mps, path: &Path) -> Result<()> {
    w.write_to(BufWriter::new(File::create(path)?))
}

fn read_mps(path: &Path) -> Result<Mps> {
    Mps::read_from(BufReader::new(File::open(path)?))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let target = Target::new(a.target.spec())?;
    let raw = target.raw_dataset(a.samples, a.seed)?;
    let d = if a.raw { raw } else { raw.normalized()? };
    d.write_csv(BufWriter::new(File::create(&a.out)?))?;
    if let Some(p) = &a.target_out {
        write_mps(&target.mps, p)?;
    }
    println!("wrote {} samples to {}", d.len(), a.out.display());
    Ok(())
}

fn load_fit(a: &FitArgs) -> Result<(FeatureMap, Dataset, TrainingData, Option<TrainingData>)> {
    let map = FeatureMap::polynomial(a.phys)?;
    let train_set = read_dataset(&a.train)?;
    let train = TrainingData::from_dataset(&train_set, &map)?;
    let test = match &a.test {
        Some(p) => Some(TrainingData::from_dataset(&read_dataset(p)?, &map)?),
        None => None,
    };
    Ok((map, train_set, train, test))
}

fn report(w: &Mps, train: &TrainingData, test: Option<&TrainingData>) -> Result<()> {
    println!("max bond     {}", w.max_bond());
    println!(
        "train loss   {:.6e}",
        dmrg::data_loss(w, train, LossKind::Mse)?
    );
    if let Some(t) = test {
        println!("test loss    {:.6e}", dmrg::data_loss(w, t, LossKind::Mse)?);
    }
    Ok(())
}

fn cmd_exact(a: FitArgs) -> Result<()> {
    let (_, train_set, train, test) = load_fit(&a)?;
    let w = ExactSolution::fit(&train.batch, &train_set.labels, a.lambda)?
        .compress(a.chi)?
        .mps;
    report(&w, &train, test.as_ref())?;
    if let Some(p) = &a.out {
        write_mps(&w, p)?;
    }
    Ok(())
}

fn cmd_dmrg(a: DmrgArgs) -> Result<()> {
    let (map, train_set, train, test) = load_fit(&a.fit)?;
    let val = match &a.val {
        Some(p) => Some(TrainingData::from_dataset(&read_dataset(p)?, &map)?),
        None => None,
    };
    let w0 = match &a.init {
        Some(p) => read_mps(p)?,
        None => {
            ExactSolution::fit(&train.batch, &train_set.labels, a.fit.lambda)?
                .compress(a.fit.chi)?
                .mps
        }
    };
    let cfg = TrainConfig {
        sweeps: a.sweeps,
        cg_steps: a.cg_steps,
        lambda: a.fit.lambda,
        ..TrainConfig::default()
    };
    let (w, trace) = dmrg::train(&w0, &train, val.as_ref(), test.as_ref(), &cfg)?;
    println!("sweeps run   {}", trace.records.len() - 1);
    println!("returned     sweep {}", trace.returned_sweep);
    println!("stalls       {}", trace.stalls.len());
    report(&w, &train, test.as_ref())?;
    if let Some(p) = &a.trace {
        trace.write_csv(BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.fit.out {
        write_mps(&w, p)?;
    }
    Ok(())
}

fn cmd_mnist(a: MnistArgs) -> Result<()> {
    let (ti, tl) = classifier::mnist_paths(&a.dir, true)?;
    let (vi, vl) = classifier::mnist_paths(&a.dir, false)?;
    let train_all = classifier::preprocess(&classifier::load_idx(ti, tl)?, a.downsample)?;
    let mut test = classifier::preprocess(&classifier::load_idx(vi, vl)?, a.downsample)?;
    if let Some(n) = a.test_size {
        test = test.take(n);
    }
    let train = train_all.take(a.ntr);
    let map = FeatureMap::trigonometric();
    let train_data = train.training_data(&map)?;
    let test_data = test.training_data(&map)?;
    let w0 = classifier::init_classifier(train_data.batch.sites(), train.classes, a.chi, a.seed)?;
    let cfg = TrainConfig {
        sweeps: a.sweeps,
        cg_steps: a.cg_steps,
        lambda: a.lambda,
        loss_kind: LossKind::CrossEntropy,
        checkpoint: Checkpoint::Last,
        early_stop: None,
        ..TrainConfig::default()
    };
    let (w, trace) = dmrg::train(&w0, &train_data, None, Some(&test_data), &cfg)?;
    println!(
        "train accuracy {:.4}",
        classifier::accuracy(&w, &train, &map)?
    );
    println!(
        "test accuracy  {:.4}",
        classifier::accuracy(&w, &test, &map)?
    );
    println!(
        "test loss      {:.6e}",
        dmrg::data_loss(&w, &test_data, LossKind::CrossEntropy)?
    );
    if let Some(p) = &a.trace {
        trace.write_csv(BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.predictions {
        classifier::write_predictions(&w, &test, &map, BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.out {
        write_mps(&w, p)?;
    }
    Ok(())
}

fn scan_config(a: &ScanArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => experiments::load_config(p)?,
        None => ExperimentConfig::preset(a.scenario, a.full),
    };
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = &a.chi {
        cfg.chi = parse_usize_list(s)?;
    }
    if let Some(s) = &a.ntr {
        cfg.ntr = parse_usize_list(s)?;
    }
    if let Some(s) = &a.eps {
        cfg.eps = parse_f64_list(s)?;
    }
    if let Some(s) = &a.noise {
        cfg.noise = parse_f64_list(s)?;
    }
    if let Some(k) = &a.kind {
        cfg.kind = match k.as_str() {
            "bond" => ScanKind::Bond,
            "trainsize" => ScanKind::TrainSize,
            "epsilon" => ScanKind::Epsilon,
            _ => ScanKind::Noise,
        };
    }
    if let Some(m) = &a.method {
        cfg.method = match m.as_str() {
            "inversion" => Method::Inversion,
            "dmrg" => Method::Dmrg,
            _ => Method::Both,
        };
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = a.sweeps {
        cfg.train.sweeps = s;
    }
    if let Some(d) = &a.mnist_dir {
        cfg.mnist.dir = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_scan(a: ScanArgs) -> Result<()> {
    let cfg = scan_config(&a)?;
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("out/{}", scenario_name(cfg.scenario))));
    let scan = experiments::run_scan(&cfg)?;
    experiments::emit_outputs(&scan, &cfg, &out)?;
    for (series, metric, o) in experiments::optima(&scan) {
        println!(
            "{series:<24} {metric:<22} χ* = {:>2}  mean {:.4e} ± {:.2e}",
            o.chi, o.mean, o.std
        );
    }
    if cfg.data == DataSource::Mnist || scan.axis != "chi" {
        for s in &scan.summary {
            println!(
                "{:<24} {:<16} {:>6} {:.4e} ± {:.2e}",
                s.series, s.metric, s.axis, s.mean, s.std
            );
        }
    }
    if scan.failed > 0 {
        eprintln!(
            "{} of {} jobs failed and were excluded",
            scan.failed, scan.jobs
        );
    }
    println!("outputs written to {}", out.display());
    Ok(())
}

fn scenario_name(s: Scenario) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "scan".into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Exact(a) => cmd_exact(a),
        Command::Dmrg(a) => cmd_dmrg(a),
        Command::Mnist(a) => cmd_mnist(a),
        Command::Scan(a) => cmd_scan(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::ScanAborted { .. } => 3,
                Error::InvalidArgument(_)
                | Error::DimensionMismatch(_)
                | Error::Domain(_)
                | Error::Capacity(_)
                | Error::Parse(_)
                | Error::Format { .. }
                | Error::DegenerateData(_) => 2,
                _ => 1,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_syntax() {
        assert_eq!(parse_usize_list("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(
            parse_usize_list("50:200:50").unwrap(),
            vec![50, 100, 150, 200]
        );
        assert_eq!(parse_usize_list("3, 7").unwrap(), vec![3, 7]);
        assert!(parse_usize_list("5..2").is_err());
        assert!(parse_usize_list("1:5:0").is_err());
        assert_eq!(parse_f64_list("0.1,0.3").unwrap(), vec![0.1, 0.3]);
        assert!(parse_f64_list("x").is_err());
    }
}
