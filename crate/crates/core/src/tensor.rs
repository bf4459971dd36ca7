//! Dense real tensors and the handful of linear-algebra kernels the rest of
//! the crate is built on: pairwise contraction, truncated SVD and LU solves.
//!
//! Tensors are stored row-major (last axis fastest). Matrices handed to the
//! decompositions are `nalgebra::DMatrix<f64>`; [`DenseTensor::to_matrix`]
//! and [`DenseTensor::from_matrix`] convert between the two layouts.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An N-way array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} needs {len} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    /// Order-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by calling `f` with every multi-index in row-major order.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        let mut idx = vec![0usize; t.shape.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            increment(&mut idx, &t.shape);
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(self.strides()).map(|(&i, s)| i * s).sum()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Same data, new extents. Row-major order is kept, so this never copies.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let n = self.order();
        let mut seen = vec![false; n];
        if axes.len() != n {
            return Err(Error::InvalidArgument(format!(
                "permutation {axes:?} does not match order {n}"
            )));
        }
        for &a in axes {
            if a >= n || seen[a] {
                return Err(Error::InvalidArgument(format!(
                    "{axes:?} is not a permutation of 0..{n}"
                )));
            }
            seen[a] = true;
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let old_strides = self.strides();
        let src_strides: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; n];
        for _ in 0..self.len() {
            let o: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[o]);
            increment(&mut idx, &new_shape);
        }
        Self::new(new_shape, out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    /// `alpha * self + beta * other`.
    pub fn axpby(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Views the tensor as a matrix whose rows run over the first `split`
    /// axes and whose columns run over the rest.
    pub fn to_matrix(&self, split: usize) -> DMatrix<f64> {
        let rows: usize = self.shape[..split].iter().product();
        let cols: usize = self.shape[split..].iter().product();
        DMatrix::from_row_slice(rows, cols, &self.data)
    }

    pub fn from_matrix(m: &DMatrix<f64>, shape: Vec<usize>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self::new(shape, data)
    }

    /// Outer product `a ⊗ b`; the result carries the axes of `a` then `b`.
    pub fn outer(&self, other: &Self) -> Self {
        let mut shape = self.shape.clone();
        shape.extend_from_slice(&other.shape);
        let mut data = Vec::with_capacity(self.len() * other.len());
        for &x in &self.data {
            data.extend(other.data.iter().map(|y| x * y));
        }
        Self { shape, data }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Sums over the paired axes of `a` and `b`.
///
/// The result holds the free axes of `a` (in order) followed by the free
/// axes of `b`. An empty `pairs` list gives the outer product.
pub fn contract(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)]) -> Result<DenseTensor> {
    let mut used_a = vec![false; a.order()];
    let mut used_b = vec![false; b.order()];
    for &(i, j) in pairs {
        if i >= a.order() || j >= b.order() {
            return Err(Error::InvalidArgument(format!(
                "axis pair ({i}, {j}) out of range for orders {} and {}",
                a.order(),
                b.order()
            )));
        }
        if used_a[i] || used_b[j] {
            return Err(Error::InvalidArgument(format!(
                "axis repeated in contraction pairs {pairs:?}"
            )));
        }
        used_a[i] = true;
        used_b[j] = true;
        if a.shape[i] != b.shape[j] {
            return Err(Error::DimensionMismatch(format!(
                "axis {i} of a has extent {} but axis {j} of b has extent {}",
                a.shape[i], b.shape[j]
            )));
        }
    }

    let free_a: Vec<usize> = (0..a.order()).filter(|&k| !used_a[k]).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|&k| !used_b[k]).collect();

    let mut perm_a = free_a.clone();
    perm_a.extend(pairs.iter().map(|p| p.0));
    let mut perm_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    perm_b.extend(free_b.iter().copied());

    let ap = a.permute(&perm_a)?;
    let bp = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let n: usize = free_b.iter().map(|&k| b.shape[k]).product();
    let k: usize = pairs.iter().map(|p| a.shape[p.0]).product();

    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &ap.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let src = &bp.data[p * n..(p + 1) * n];
            for (d, &y) in dst.iter_mut().zip(src) {
                *d += x * y;
            }
        }
    }

    let mut shape: Vec<usize> = free_a.iter().map(|&k| a.shape[k]).collect();
    shape.extend(free_b.iter().map(|&k| b.shape[k]));
    if shape.is_empty() {
        return Ok(DenseTensor::scalar(out[0]));
    }
    DenseTensor::new(shape, out)
}

/// Truncated singular value decomposition `m ≈ left · diag(σ) · right`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `rows × r`, orthonormal columns.
    pub left: DMatrix<f64>,
    /// Non-increasing, length `r`.
    pub singular_values: Vec<f64>,
    /// `r × cols`, orthonormal rows.
    pub right: DMatrix<f64>,
    /// Sum of squares of the dropped singular values.
    pub discarded_weight: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut l = self.left.clone();
        for (c, s) in self.singular_values.iter().enumerate() {
            l.column_mut(c).scale_mut(*s);
        }
        l * &self.right
    }
}

/// Relative size below which a singular value is treated as an exact zero.
const RANK_TOLERANCE: f64 = 1e-14;

/// SVD of `m` keeping at most `max_rank` triples and dropping any whose
/// squared value is at most `cutoff` times the total squared weight.
///
/// Singular values that are zero to working precision are always dropped,
/// but at least one triple is kept so bond extents stay ≥ 1.
pub fn svd_truncate(m: &DMatrix<f64>, max_rank: usize, cutoff: f64) -> Result<SvdResult> {
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be at least 1".into()));
    }
    if !(cutoff >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cutoff must be ≥ 0, got {cutoff}"
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "matrix handed to svd_truncate has non-finite entries".into(),
        ));
    }

    let (u, sigma, vt) = jacobi_svd(m);

    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let largest = sigma.first().copied().unwrap_or(0.0);
    let dims = m.nrows().max(m.ncols()) as f64;
    let numeric_rank = sigma
        .iter()
        .take_while(|&&s| s > largest * RANK_TOLERANCE * dims.max(1.0) && s > 0.0)
        .count();
    let above_cutoff = sigma
        .iter()
        .take_while(|&&s| s * s > cutoff * total)
        .count();
    let keep = max_rank.min(numeric_rank).min(above_cutoff).max(1);

    let discarded_weight = sigma[keep..].iter().map(|s| s * s).sum();
    let mut left = u.columns(0, keep).into_owned();
    if sigma[0] == 0.0 {
        left[(0, 0)] = 1.0;
    }
    Ok(SvdResult {
        left,
        singular_values: sigma[..keep].to_vec(),
        right: vt.rows(0, keep).into_owned(),
        discarded_weight,
    })
}

/// Full thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Returns `(u, σ, vᵀ)` with σ sorted non-increasing. Columns of `u` that
/// belong to zero singular values are left as zero vectors; callers only
/// keep triples above the numerical rank.
fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (u, s, vt) = jacobi_svd(&m.transpose());
        return (vt.transpose(), s, u.transpose());
    }
    let (rows, cols) = (m.nrows(), m.ncols());
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
                for i in 0..cols {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let mut u = DMatrix::zeros(rows, cols);
    let mut vt = DMatrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > 0.0 {
            u.set_column(k, &(a.column(j) / s));
        }
        vt.set_row(k, &v.column(j).transpose());
        sigma.push(s);
    }
    (u, sigma, vt)
}

/// Solves `a · w = b` by LU factorization with partial pivoting, followed by
/// one step of iterative refinement against the same factors.
pub fn solve_linear(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "system matrix is {}×{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} rows, right-hand side has {} entries",
            a.nrows(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "linear system has non-finite entries".into(),
        ));
    }
    let lu = a.clone().lu();
    let mut w = lu.solve(b).ok_or(Error::SingularMatrix)?;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularMatrix);
    }
    let residual = b - a * &w;
    if let Some(correction) = lu.solve(&residual) {
        if correction.iter().all(|x| x.is_finite()) {
            w += correction;
        }
    }
    Ok(w)
}

/// True when a Cholesky factorization of `a` succeeds.
pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.clone().cholesky().is_some()
}
