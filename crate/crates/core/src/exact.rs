//! Closed-form ridge regression in the full `f^N` weight space, followed by
//! SVD compression to a bond-dimension-capped MPS.
//!
//! Only feasible for small `f^N`; the design matrix is capped at
//! [`DESIGN_LIMIT`] columns.

use nalgebra::{DMatrix, DVector};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::feature_map::{FeatureBatch, FeatureMap};
use crate::mps::{Compressed, Mps};
use crate::tensor::{solve_linear, DenseTensor};

pub const DESIGN_LIMIT: usize = 10_000;

/// Normal equations `A w = b` with `A = ΦᵀΦ/T + λI` and `b = Φᵀy/T`.
#[derive(Clone, Debug)]
pub struct DesignSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda: f64,
    pub sites: usize,
    pub phys_dim: usize,
}

/// Row `i` is the flattened (row-major) product feature tensor of sample `i`.
pub fn design_matrix(batch: &FeatureBatch) -> Result<DMatrix<f64>> {
    let (n, f) = (batch.sites(), batch.dim());
    let cols = full_dim(n, f)?;
    let mut phi = DMatrix::zeros(batch.len(), cols);
    let mut row = vec![0.0; cols];
    for i in 0..batch.len() {
        row[0] = 1.0;
        let mut len = 1;
        for j in 0..n {
            let local = batch.local(i, j);
            // Expand in place from the back so earlier entries stay intact.
            for p in (0..len).rev() {
                let v = row[p];
                for (k, &lk) in local.iter().enumerate() {
                    row[p * f + k] = v * lk;
                }
            }
            len *= f;
        }
        for (c, v) in row.iter().enumerate() {
            phi[(i, c)] = *v;
        }
    }
    Ok(phi)
}

fn full_dim(sites: usize, phys_dim: usize) -> Result<usize> {
    let cols = (phys_dim as f64).powi(sites as i32);
    if cols > DESIGN_LIMIT as f64 {
        return Err(Error::Capacity(format!(
            "full weight space has {cols:.0} entries (limit {DESIGN_LIMIT})"
        )));
    }
    Ok(cols as usize)
}

pub fn build_design_system(
    batch: &FeatureBatch,
    labels: &[f64],
    lambda: f64,
) -> Result<DesignSystem> {
    if labels.len() != batch.len() || batch.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            batch.len()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "λ must be ≥ 0, got {lambda}"
        )));
    }
    let phi = design_matrix(batch)?;
    let t = batch.len() as f64;
    let mut a = phi.tr_mul(&phi) / t;
    // Mirror the upper triangle so A is symmetric to the last bit.
    for i in 0..a.nrows() {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
        a[(i, i)] += lambda;
    }
    let y = DVector::from_column_slice(labels);
    let b = phi.tr_mul(&y) / t;
    Ok(DesignSystem {
        a,
        b,
        lambda,
        sites: batch.sites(),
        phys_dim: batch.dim(),
    })
}

impl DesignSystem {
    pub fn from_dataset(d: &Dataset, map: &FeatureMap, lambda: f64) -> Result<Self> {
        build_design_system(&d.featurize(map)?, &d.labels, lambda)
    }

    /// `A w − b`, the gradient of the ridge objective with respect to the
    /// flattened weight.
    pub fn gradient(&self, w: &DenseTensor) -> DVector<f64> {
        &self.a * DVector::from_column_slice(w.data()) - &self.b
    }
}

/// Solves the normal equations and returns `W` with shape `(f, …, f)`.
pub fn solve_full_weight(sys: &DesignSystem) -> Result<DenseTensor> {
    let w = solve_linear(&sys.a, &sys.b)?;
    DenseTensor::new(vec![sys.phys_dim; sys.sites], w.as_slice().to_vec())
}

/// Exact ridge solution of a dataset, kept so it can be compressed to many
/// bond dimensions without re-solving.
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub weight: DenseTensor,
}

impl ExactSolution {
    pub fn fit(batch: &FeatureBatch, labels: &[f64], lambda: f64) -> Result<Self> {
        let sys = build_design_system(batch, labels, lambda)?;
        Ok(Self {
            weight: solve_full_weight(&sys)?,
        })
    }

    pub fn compress(&self, max_bond: usize) -> Result<Compressed> {
        Mps::compress(&self.weight, max_bond, 0.0)
    }
}

/// Ridge solve in the full space, then SVD compression to bond `≤ χ`.
pub fn inversion_and_compression(
    batch: &FeatureBatch,
    labels: &[f64],
    lambda: f64,
    chi: usize,
) -> Result<Mps> {
    Ok(ExactSolution::fit(batch, labels, lambda)?
        .compress(chi)?
        .mps)
}
