//! Local feature maps and product feature tensors.
//!
//! A sample `x ∈ ℝᴺ` is embedded as the outer product of `N` local vectors
//! `φ(x_j) ∈ ℝᶠ`. The outer product is never formed; a [`FeaturizedSample`]
//! keeps the local vectors and the MPS contracts them one site at a time.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// `(1, x, x², …, x^{f−1})`.
    Polynomial,
    /// `(cos(πx/2), sin(πx/2))` on `x ∈ [0, 1]`; always `f = 2`.
    Trigonometric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    kind: MapKind,
    dim: usize,
}

impl FeatureMap {
    pub fn polynomial(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature dimension must be ≥ 2, got {dim}"
            )));
        }
        Ok(Self {
            kind: MapKind::Polynomial,
            dim,
        })
    }

    pub fn trigonometric() -> Self {
        Self {
            kind: MapKind::Trigonometric,
            dim: 2,
        }
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes `φ(x)` into `out`, which must have length `f`.
    pub fn apply_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("feature value {x} is not finite")));
        }
        match self.kind {
            MapKind::Polynomial => {
                let mut p = 1.0;
                for o in out.iter_mut() {
                    *o = p;
                    p *= x;
                }
            }
            MapKind::Trigonometric => {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Domain(format!(
                        "trigonometric map needs 0 ≤ x ≤ 1, got {x}"
                    )));
                }
                let (s, c) = (FRAC_PI_2 * x).sin_cos();
                out[0] = c;
                out[1] = s;
            }
        }
        Ok(())
    }

    pub fn apply_scalar(&self, x: f64) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        self.apply_into(x, &mut v)?;
        Ok(v)
    }

    pub fn featurize(&self, x: &[f64]) -> Result<FeaturizedSample> {
        if x.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot featurize an empty sample".into(),
            ));
        }
        let mut data = vec![0.0; x.len() * self.dim];
        for (xj, chunk) in x.iter().zip(data.chunks_mut(self.dim)) {
            self.apply_into(*xj, chunk)?;
        }
        Ok(FeaturizedSample {
            dim: self.dim,
            data,
        })
    }

    /// Featurizes every row of a row-major `rows × sites` matrix.
    pub fn featurize_batch(&self, features: &[f64], sites: usize) -> Result<FeatureBatch> {
        if sites == 0 || !features.len().is_multiple_of(sites) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not split into rows of {sites}",
                features.len()
            )));
        }
        let mut data = vec![0.0; features.len() * self.dim];
        for (x, chunk) in features.iter().zip(data.chunks_mut(self.dim)) {
            self.apply_into(*x, chunk)?;
        }
        Ok(FeatureBatch {
            samples: features.len() / sites,
            sites,
            dim: self.dim,
            data,
        })
    }
}

/// The `N` local vectors of one sample; implicitly their outer product.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturizedSample {
    dim: usize,
    data: Vec<f64>,
}

impl FeaturizedSample {
    pub fn from_locals(locals: Vec<Vec<f64>>) -> Result<Self> {
        let dim = locals.first().map(Vec::len).unwrap_or(0);
        if locals.is_empty() || dim == 0 || locals.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidArgument(
                "local vectors must be non-empty and of equal length".into(),
            ));
        }
        Ok(Self {
            dim,
            data: locals.concat(),
        })
    }

    pub fn sites(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn local(&self, site: usize) -> &[f64] {
        &self.data[site * self.dim..(site + 1) * self.dim]
    }

    pub fn locals(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Forms the full `f^N` feature tensor. Only for small `N`.
    pub fn to_full_tensor(&self) -> DenseTensor {
        let mut full = DenseTensor::scalar(1.0);
        for v in self.locals() {
            let local = DenseTensor::new(vec![v.len()], v.to_vec()).expect("non-empty local");
            full = full.outer(&local);
        }
        full
    }
}

/// A batch of featurized samples stored contiguously as `[T][N][f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    samples: usize,
    sites: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn local(&self, sample: usize, site: usize) -> &[f64] {
        let o = (sample * self.sites + site) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// All local vectors of one sample, `N·f` values.
    pub fn sample(&self, sample: usize) -> &[f64] {
        let w = self.sites * self.dim;
        &self.data[sample * w..(sample + 1) * w]
    }

    pub fn get(&self, sample: usize) -> FeaturizedSample {
        FeaturizedSample {
            dim: self.dim,
            data: self.sample(sample).to_vec(),
        }
    }

    /// Keeps only the listed samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sites * self.dim);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            samples: indices.len(),
            sites: self.sites,
            dim: self.dim,
            data,
        }
    }

    /// Overwrites the local vector of one site of one sample.
    pub fn set_local(&mut self, sample: usize, site: usize, values: &[f64]) {
        let o = (sample * self.sites + site) * self.dim;
        self.data[o..o + self.dim].copy_from_slice(values);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_values() {
        let m = FeatureMap::polynomial(3).unwrap();
        assert_eq!(m.apply_scalar(2.0).unwrap(), vec![1.0, 2.0, 4.0]);
        assert_eq!(m.apply_scalar(0.0).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn trigonometric_endpoint_and_domain() {
        let m = FeatureMap::trigonometric();
        let v = m.apply_scalar(1.0).unwrap();
        assert!(v[0].abs() <= 1e-15 && (v[1] - 1.0).abs() <= 1e-15);
        assert!(matches!(m.apply_scalar(1.5), Err(Error::Domain(_))));
        assert!(matches!(m.apply_scalar(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn feature_dim_below_two_is_rejected() {
        assert!(FeatureMap::polynomial(1).is_err());
    }

    #[test]
    fn featurize_two_sites() {
        let m = FeatureMap::polynomial(3).unwrap();
        let s = m.featurize(&[1.0, 2.0]).unwrap();
        assert_eq!(s.local(0), &[1.0, 1.0, 1.0]);
        assert_eq!(s.local(1), &[1.0, 2.0, 4.0]);
        assert!(m.featurize(&[]).is_err());
        assert!(m.featurize(&[f64::NAN]).is_err());
    }

    #[test]
    fn single_site_is_apply_scalar() {
        let m = FeatureMap::polynomial(4).unwrap();
        let s = m.featurize(&[0.7]).unwrap();
        assert_eq!(s.local(0), m.apply_scalar(0.7).unwrap().as_slice());
    }

    #[test]
    fn outer_product_matches_full_feature_tensor() {
        let m = FeatureMap::polynomial(3).unwrap();
        let x = [0.3, -1.2, 2.0, 0.5, -0.7, 1.1];
        let full = m.featurize(&x).unwrap().to_full_tensor();
        assert_eq!(full.len(), 729);
        let reference = DenseTensor::from_fn(vec![3; 6], |idx| {
            idx.iter()
                .zip(&x)
                .map(|(&p, xj)| xj.powi(p as i32))
                .product()
        })
        .unwrap();
        for (a, b) in full.data().iter().zip(reference.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn polynomial_recurrence() {
        let m = FeatureMap::polynomial(5).unwrap();
        for &x in &[-2.5, -0.1, 0.0, 0.4, 3.0] {
            let v = m.apply_scalar(x).unwrap();
            for k in 0..4 {
                assert!((v[k + 1] - x * v[k]).abs() <= 1e-15 * v[k + 1].abs().max(1.0));
            }
        }
    }
}
