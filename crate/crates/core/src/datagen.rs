//! Synthetic regression data whose labels an MPS represents exactly.
//!
//! The generating MPS stacks powers of a nilpotent matrix
//! `M = ε·(superdiagonal shift)` on every site, so slice `k` of each core is
//! `Mᵏ` (optionally conjugated by a random orthogonal `U`). The first core is
//! `lᵀ Mᵏ` and the last is `Mᵏ r` for Gaussian vectors `l`, `r`. Every
//! monomial of total degree `n` in the resulting label polynomial therefore
//! carries exactly `εⁿ`, and `ε` alone tunes how much higher-order structure
//! the data has.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::{FeatureBatch, FeatureMap};
use crate::mps::Mps;
use crate::tensor::DenseTensor;

/// How the nilpotent matrix is rotated before it is placed on the sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conjugation {
    /// Plain `Mᵏ` everywhere.
    None,
    /// One orthogonal `U`, `(UMUᵀ)ᵏ` on every site.
    Shared,
    /// An independent orthogonal `U_j` per site.
    PerSite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub sites: usize,
    pub phys_dim: usize,
    pub epsilon: f64,
    /// Size of the nilpotent matrix, i.e. the bond dimension of the target.
    pub chi: usize,
    pub conjugation: Conjugation,
    pub seed: u64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            sites: 6,
            phys_dim: 3,
            epsilon: 0.3,
            chi: 27,
            conjugation: Conjugation::PerSite,
            seed: 1,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sites == 0 {
            return Err(Error::InvalidArgument(
                "target needs at least one site".into(),
            ));
        }
        if self.phys_dim < 2 {
            return Err(Error::InvalidArgument(
                "feature dimension must be ≥ 2".into(),
            ));
        }
        if self.chi < 2 {
            return Err(Error::InvalidArgument(format!(
                "target χ must be ≥ 2, got {}",
                self.chi
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ε must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::polynomial(self.phys_dim).expect("validated feature dimension")
    }
}

/// `size × size` matrix with `ε` on the first superdiagonal.
pub fn build_nilpotent(size: usize, epsilon: f64) -> DMatrix<f64> {
    DMatrix::from_fn(size, size, |i, j| if j == i + 1 { epsilon } else { 0.0 })
}

/// Haar-random orthogonal matrix: QR of a Gaussian matrix with the signs of
/// `diag(R)` folded into `Q`.
pub fn random_orthogonal(size: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    orthogonal_from(&mut rng, size)
}

fn orthogonal_from(rng: &mut ChaCha8Rng, size: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(size, size, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..size {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Builds the generating MPS with Gaussian boundary vectors drawn from
/// `spec.seed`.
pub fn build_target_mps(spec: &TargetSpec) -> Result<Mps> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let left: Vec<f64> = (0..spec.chi).map(|_| rng.sample(StandardNormal)).collect();
    let right: Vec<f64> = (0..spec.chi).map(|_| rng.sample(StandardNormal)).collect();
    assemble(spec, &left, &right, &mut rng)
}

/// Like [`build_target_mps`] but with caller-supplied boundary vectors.
pub fn build_target_mps_with_boundaries(
    spec: &TargetSpec,
    left: &[f64],
    right: &[f64],
) -> Result<Mps> {
    spec.validate()?;
    if left.len() != spec.chi || right.len() != spec.chi {
        return Err(Error::DimensionMismatch(format!(
            "boundary vectors must have length χ = {}",
            spec.chi
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Keep the unitary stream aligned with build_target_mps.
    for _ in 0..2 * spec.chi {
        let _: f64 = rng.sample(StandardNormal);
    }
    assemble(spec, left, right, &mut rng)
}

fn assemble(spec: &TargetSpec, left: &[f64], right: &[f64], rng: &mut ChaCha8Rng) -> Result<Mps> {
    let (n, f, chi) = (spec.sites, spec.phys_dim, spec.chi);
    let m = build_nilpotent(chi, spec.epsilon);
    let mut powers = vec![DMatrix::identity(chi, chi)];
    for k in 1..f {
        powers.push(&powers[k - 1] * &m);
    }
    let rotations: Vec<Option<DMatrix<f64>>> = match spec.conjugation {
        Conjugation::None => vec![None; n],
        Conjugation::Shared => vec![Some(orthogonal_from(rng, chi)); n],
        Conjugation::PerSite => (0..n).map(|_| Some(orthogonal_from(rng, chi))).collect(),
    };
    let slices = |j: usize| -> Vec<DMatrix<f64>> {
        powers
            .iter()
            .map(|p| match &rotations[j] {
                Some(u) => u * p * u.transpose(),
                None => p.clone(),
            })
            .collect()
    };
    let l = DVector::from_column_slice(left);
    let r = DVector::from_column_slice(right);

    let mut cores = Vec::with_capacity(n);
    for j in 0..n {
        let mats = slices(j);
        let core = if n == 1 {
            DenseTensor::from_fn(vec![1, f, 1], |i| {
                (l.transpose() * &mats[i[1]] * &r)[(0, 0)]
            })?
        } else if j == 0 {
            let rows: Vec<_> = mats.iter().map(|mk| l.transpose() * mk).collect();
            DenseTensor::from_fn(vec![1, f, chi], |i| rows[i[1]][(0, i[2])])?
        } else if j == n - 1 {
            let cols: Vec<_> = mats.iter().map(|mk| mk * &r).collect();
            DenseTensor::from_fn(vec![chi, f, 1], |i| cols[i[1]][i[0]])?
        } else {
            DenseTensor::from_fn(vec![chi, f, chi], |i| mats[i[1]][(i[0], i[2])])?
        };
        cores.push(core);
    }
    Mps::new(cores, None)
}

/// `samples × sites` i.i.d. standard normal features, row-major.
pub fn sample_features(samples: usize, sites: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples * sites)
        .map(|_| rng.sample(StandardNormal))
        .collect()
}

/// Regression samples with (possibly normalized) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major `len × sites`.
    pub features: Vec<f64>,
    pub sites: usize,
    pub labels: Vec<f64>,
    /// Stored labels are `(raw − label_mean) / label_std`.
    pub label_mean: f64,
    pub label_std: f64,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, sites: usize, labels: Vec<f64>) -> Result<Self> {
        if sites == 0 || features.len() != labels.len() * sites {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} labels with {sites} sites",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            sites,
            labels,
            label_mean: 0.0,
            label_std: 1.0,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.sites..(i + 1) * self.sites]
    }

    pub fn featurize(&self, map: &FeatureMap) -> Result<FeatureBatch> {
        map.featurize_batch(&self.features, self.sites)
    }

    /// Labels mapped back to the generator's scale.
    pub fn raw_labels(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|y| y * self.label_std + self.label_mean)
            .collect()
    }

    /// Population mean and standard deviation (denominator `T`) of the
    /// stored labels.
    pub fn label_stats(&self) -> (f64, f64) {
        mean_std(&self.labels)
    }

    /// Re-expresses the labels as `(raw − mean) / std` for the given
    /// statistics of the raw labels.
    pub fn normalized_with(&self, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::DegenerateData(format!(
                "cannot normalize with mean {mean} and std {std}"
            )));
        }
        let raw = self.raw_labels();
        Ok(Self {
            labels: raw.iter().map(|y| (y - mean) / std).collect(),
            label_mean: mean,
            label_std: std,
            ..self.clone()
        })
    }

    /// Normalizes the labels by their own mean and standard deviation.
    pub fn normalized(&self) -> Result<Self> {
        let (mean, std) = mean_std(&self.raw_labels());
        if !(std > 1e-300) || std <= 1e-14 * mean.abs() {
            return Err(Error::DegenerateData("labels have zero variance".into()));
        }
        self.normalized_with(mean, std)
    }

    /// CSV with header `x1,…,xN,y`; every value carries 17 significant digits.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.sites).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|x| format!("{x:.16e}")).collect();
            rec.push(format!("{:.16e}", self.labels[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`Dataset::write_csv`]. The labels are taken
    /// as stored; the normalization record is reset to the identity.
    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 2 || &header[cols - 1] != "y" {
            return Err(Error::Parse(
                "dataset CSV must end with a `y` column".into(),
            ));
        }
        for (j, name) in header.iter().take(cols - 1).enumerate() {
            if name != format!("x{}", j + 1) {
                return Err(Error::Parse(format!("unexpected column {name:?}")));
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("{field:?}: {e}")))?;
                if j + 1 == cols {
                    labels.push(v);
                } else {
                    features.push(v);
                }
            }
        }
        Self::new(features, cols - 1, labels)
    }
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The generating MPS together with its spec, so that many datasets can be
/// drawn from one target.
#[derive(Clone, Debug)]
pub struct Target {
    pub spec: TargetSpec,
    pub mps: Mps,
}

impl Target {
    pub fn new(spec: TargetSpec) -> Result<Self> {
        let mps = build_target_mps(&spec)?;
        Ok(Self { spec, mps })
    }

    /// Samples with unnormalized labels `W_T · Φ(x)`.
    pub fn raw_dataset(&self, samples: usize, seed: u64) -> Result<Dataset> {
        if samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let features = sample_features(samples, self.spec.sites, seed);
        let batch = self
            .spec
            .feature_map()
            .featurize_batch(&features, self.spec.sites)?;
        let labels = self.mps.evaluate_batch(&batch)?;
        let mut d = Dataset::new(features, self.spec.sites, labels)?;
        d.seed = Some(seed);
        Ok(d)
    }

    /// Samples with labels normalized by their own statistics.
    pub fn dataset(&self, samples: usize, seed: u64) -> Result<Dataset> {
        if samples < 2 {
            return Err(Error::InvalidArgument(
                "normalization needs at least two samples".into(),
            ));
        }
        self.raw_dataset(samples, seed)?.normalized()
    }
}

/// Builds the target from `spec` and draws `samples` normalized samples.
pub fn generate_dataset(spec: &TargetSpec, samples: usize, seed: u64) -> Result<Dataset> {
    Target::new(spec.clone())?.dataset(samples, seed)
}

/// Reassigns exactly `round(p·T)` distinct labels to a different class,
/// chosen uniformly.
pub fn add_label_noise(
    labels: &[usize],
    fraction: f64,
    classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "noise fraction must be in [0, 1], got {fraction}"
        )));
    }
    let count = (fraction * labels.len() as f64).round() as usize;
    if count == 0 {
        return Ok(labels.to_vec());
    }
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "label noise needs at least two classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.to_vec();
    let mut picked = index::sample(&mut rng, labels.len(), count).into_vec();
    picked.sort_unstable();
    for i in picked {
        let shift = rng.random_range(1..classes);
        out[i] = (labels[i] + shift) % classes;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nilpotent_three() {
        let m = build_nilpotent(3, 0.7);
        assert_eq!(m[(0, 1)], 0.7);
        assert_eq!(m[(1, 2)], 0.7);
        let m2 = &m * &m;
        assert!((m2[(0, 2)] - 0.49).abs() < 1e-15);
        assert_eq!(m2.iter().filter(|&&x| x != 0.0).count(), 1);
        assert!((&m2 * &m).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nilpotent_degenerate_and_powers() {
        assert_eq!(build_nilpotent(1, 3.0), DMatrix::zeros(1, 1));
        let m = build_nilpotent(5, 0.5);
        let m4 = m.pow(4);
        assert_eq!(m4[(0, 4)], 0.0625);
        assert_eq!(m4.iter().filter(|&&x| x != 0.0).count(), 1);
        assert!(m.pow(5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn orthogonal_matrices() {
        for size in [1, 3, 27] {
            let u = random_orthogonal(size, 5);
            let err = (u.transpose() * &u - DMatrix::identity(size, size)).amax();
            assert!(err <= 1e-12);
        }
        let one = random_orthogonal(1, 9);
        assert_eq!(one[(0, 0)].abs(), 1.0);
        assert_eq!(random_orthogonal(4, 2), random_orthogonal(4, 2));
    }

    #[test]
    fn conjugation_commutes_with_powers() {
        let u = random_orthogonal(4, 1);
        let m = build_nilpotent(4, 0.9);
        let c = &u * &m * u.transpose();
        for k in 1..=4 {
            let lhs = c.pow(k);
            let rhs = &u * m.pow(k) * u.transpose();
            assert!((lhs - rhs).amax() <= 1e-12);
        }
    }

    #[test]
    fn features_are_seeded() {
        let a = sample_features(5, 3, 1);
        assert_eq!(a, sample_features(5, 3, 1));
        assert_ne!(a, sample_features(5, 3, 2));
    }

    #[test]
    fn features_are_standard_normal() {
        let x = sample_features(100_000, 1, 3);
        let (m, s) = mean_std(&x);
        assert!(m.abs() <= 0.02 && (s - 1.0).abs() <= 0.02);
    }

    #[test]
    fn normalized_labels_have_zero_mean_unit_std() {
        let d = generate_dataset(&TargetSpec::default(), 300, 4).unwrap();
        let (m, s) = d.label_stats();
        assert!(m.abs() <= 1e-12 && (s - 1.0).abs() <= 1e-12);
        let raw = d.raw_labels();
        let back = Dataset::new(d.features.clone(), 6, raw)
            .unwrap()
            .normalized()
            .unwrap();
        for (a, b) in back.labels.iter().zip(&d.labels) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_variance_labels_are_rejected() {
        let d = Dataset::new(vec![0.0; 4], 2, vec![3.0, 3.0]).unwrap();
        assert!(matches!(d.normalized(), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn replicates_share_the_target() {
        let spec = TargetSpec::default();
        let a = build_target_mps(&spec).unwrap();
        let b = build_target_mps(&spec).unwrap();
        for (x, y) in a.cores().iter().zip(b.cores()) {
            assert_eq!(x.data(), y.data());
        }
        let t = Target::new(spec).unwrap();
        assert_ne!(
            t.dataset(10, 1).unwrap().features,
            t.dataset(10, 2).unwrap().features
        );
    }

    #[test]
    fn label_spread_grows_with_epsilon() {
        let spec = |epsilon| TargetSpec {
            epsilon,
            ..TargetSpec::default()
        };
        let lo = Target::new(spec(0.3))
            .unwrap()
            .raw_dataset(2000, 7)
            .unwrap();
        let hi = Target::new(spec(1.0))
            .unwrap()
            .raw_dataset(2000, 7)
            .unwrap();
        assert!(mean_std(&hi.labels).1 > mean_std(&lo.labels).1);
    }

    #[test]
    fn noise_counts_and_fixed_points() {
        let labels: Vec<usize> = (0..1024).map(|i| i % 10).collect();
        assert_eq!(add_label_noise(&labels, 0.0, 10, 1).unwrap(), labels);
        let all = add_label_noise(&labels, 1.0, 10, 1).unwrap();
        assert!(all.iter().zip(&labels).all(|(a, b)| a != b && *a < 10));
        let some = add_label_noise(&labels, 0.1, 10, 1).unwrap();
        assert_eq!(
            some.iter().zip(&labels).filter(|(a, b)| a != b).count(),
            102
        );
        assert_eq!(some, add_label_noise(&labels, 0.1, 10, 1).unwrap());
        assert!(add_label_noise(&[0, 0], 0.5, 1, 1).is_err());
        assert!(add_label_noise(&[0, 0], 1.5, 2, 1).is_err());
    }

    #[test]
    fn coefficients_scale_as_epsilon_to_the_degree() {
        let spec = |epsilon| TargetSpec {
            sites: 3,
            phys_dim: 3,
            epsilon,
            chi: 5,
            conjugation: Conjugation::PerSite,
            seed: 3,
        };
        let a = build_target_mps(&spec(0.4))
            .unwrap()
            .to_full_tensor()
            .unwrap();
        let b = build_target_mps(&spec(0.8))
            .unwrap()
            .to_full_tensor()
            .unwrap();
        let mut checked = 0;
        for i in 0..27 {
            let idx = [i / 9, (i / 3) % 3, i % 3];
            let degree: usize = idx.iter().sum();
            let (x, y) = (a.get(&idx), b.get(&idx));
            if x.abs() > 1e-12 {
                assert!(
                    (y / x - 2f64.powi(degree as i32)).abs() <= 1e-9 * 2f64.powi(degree as i32)
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn explicit_boundaries_give_single_monomial() {
        let spec = TargetSpec {
            sites: 2,
            phys_dim: 2,
            epsilon: 0.5,
            chi: 3,
            conjugation: Conjugation::None,
            seed: 0,
        };
        let w =
            build_target_mps_with_boundaries(&spec, &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        let map = spec.feature_map();
        for (x1, x2) in [(1.0, 2.0), (-0.5, 3.0), (0.0, 1.0)] {
            let y = w.evaluate(&map.featurize(&[x1, x2]).unwrap()).unwrap();
            assert!((y - 0.25 * x1 * x2).abs() < 1e-15);
        }
    }

    #[test]
    fn small_epsilon_gives_nearly_constant_labels() {
        let spec = TargetSpec {
            epsilon: 1e-9,
            ..TargetSpec::default()
        };
        let d = Target::new(spec).unwrap().raw_dataset(50, 1).unwrap();
        let (m, s) = mean_std(&d.labels);
        assert!(s <= 1e-6 * m.abs());
    }

    #[test]
    fn center_bond_is_full_rank() {
        let spec = TargetSpec {
            epsilon: 1.0,
            ..TargetSpec::default()
        };
        let full = build_target_mps(&spec).unwrap().to_full_tensor().unwrap();
        let c = Mps::compress(&full, 729, 0.0).unwrap();
        assert_eq!(c.mps.bond_profile().dims, vec![3, 9, 27, 9, 3]);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let d = generate_dataset(&TargetSpec::default(), 20, 3).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,x3,x4,x5,x6,y\n"));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.features, d.features);
        assert_eq!(back.labels, d.labels);
    }
}
