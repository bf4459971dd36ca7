//! Matrix product state weights.
//!
//! Core `j` has shape `(χ_{j−1}, f, χ_j)` with `χ_{−1} = χ_{N−1} = 1`. A
//! labeled MPS carries one extra class axis on a single core, which then has
//! shape `(χ_{j−1}, f, C, χ_j)`. Wherever a core is reshaped into a matrix
//! the class axis travels with the physical axis.
//!
//! ```text
//!   A[0] ─ χ₀ ─ A[1] ─ χ₁ ─ … ─ A[N−1]
//!    │           │  ╲            │
//!    f           f   C (label)   f
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::{FeatureBatch, FeaturizedSample};
use crate::tensor::{svd_truncate, DenseTensor};

/// Largest number of entries [`Mps::to_full_tensor`] will materialize.
pub const FULL_TENSOR_LIMIT: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSite {
    pub site: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    None,
    /// Every core left of `center` is left-orthonormal and every core right
    /// of it is right-orthonormal.
    Mixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BondProfile {
    pub dims: Vec<usize>,
    pub max: usize,
}

#[derive(Clone, Debug)]
pub struct Mps {
    cores: Vec<DenseTensor>,
    phys_dim: usize,
    label: Option<LabelSite>,
    gauge: Gauge,
}

/// Output of [`Mps::compress`] and [`Mps::truncate_with_weight`].
#[derive(Clone, Debug)]
pub struct Compressed {
    pub mps: Mps,
    /// Discarded squared singular weight at each bond.
    pub discarded: Vec<f64>,
}

impl Compressed {
    pub fn total_discarded(&self) -> f64 {
        self.discarded.iter().sum()
    }
}

impl Mps {
    pub fn new(cores: Vec<DenseTensor>, label: Option<LabelSite>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::InvalidArgument(
                "an MPS needs at least one core".into(),
            ));
        }
        if let Some(l) = label {
            if l.site >= cores.len() || l.classes == 0 {
                return Err(Error::InvalidArgument(format!("bad label site {l:?}")));
            }
        }
        let phys_dim = cores[0].shape().get(1).copied().unwrap_or(0);
        let mut left = 1;
        for (j, core) in cores.iter().enumerate() {
            let labeled = label.is_some_and(|l| l.site == j);
            let s = core.shape();
            let expected_order = if labeled { 4 } else { 3 };
            if s.len() != expected_order {
                return Err(Error::DimensionMismatch(format!(
                    "core {j} has order {}, expected {expected_order}",
                    s.len()
                )));
            }
            if labeled && s[2] != label.unwrap().classes {
                return Err(Error::DimensionMismatch(format!(
                    "label core has {} classes, expected {}",
                    s[2],
                    label.unwrap().classes
                )));
            }
            if s[0] != left || s[1] != phys_dim {
                return Err(Error::DimensionMismatch(format!(
                    "core {j} has shape {s:?}; expected left bond {left} and physical extent {phys_dim}"
                )));
            }
            left = s[s.len() - 1];
        }
        if left != 1 {
            return Err(Error::DimensionMismatch(
                "right boundary bond must be 1".into(),
            ));
        }
        Ok(Self {
            cores,
            phys_dim,
            label,
            gauge: Gauge::None,
        })
    }

    /// Product state `v₁ ⊗ v₂ ⊗ …`, all bonds 1.
    pub fn product_state(vectors: &[Vec<f64>]) -> Result<Self> {
        let cores = vectors
            .iter()
            .map(|v| DenseTensor::new(vec![1, v.len(), 1], v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cores, None)
    }

    pub fn sites(&self) -> usize {
        self.cores.len()
    }

    pub fn phys_dim(&self) -> usize {
        self.phys_dim
    }

    pub fn label(&self) -> Option<LabelSite> {
        self.label
    }

    pub fn classes(&self) -> usize {
        self.label.map_or(1, |l| l.classes)
    }

    pub fn gauge(&self) -> Gauge {
        self.gauge
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn core(&self, site: usize) -> &DenseTensor {
        &self.cores[site]
    }

    pub(crate) fn core_mut(&mut self, site: usize) -> &mut DenseTensor {
        self.gauge = Gauge::None;
        &mut self.cores[site]
    }

    pub(crate) fn set_gauge(&mut self, gauge: Gauge) {
        self.gauge = gauge;
    }

    pub fn num_parameters(&self) -> usize {
        self.cores.iter().map(DenseTensor::len).sum()
    }

    pub fn left_dim(&self, site: usize) -> usize {
        self.cores[site].shape()[0]
    }

    pub fn right_dim(&self, site: usize) -> usize {
        *self.cores[site].shape().last().unwrap()
    }

    /// Class extent of a core: `C` at the label site, 1 elsewhere.
    pub fn core_classes(&self, site: usize) -> usize {
        match self.label {
            Some(l) if l.site == site => l.classes,
            _ => 1,
        }
    }

    pub fn bond_profile(&self) -> BondProfile {
        let dims: Vec<usize> = (0..self.sites() - 1).map(|j| self.right_dim(j)).collect();
        let max = dims.iter().copied().max().unwrap_or(1);
        BondProfile { dims, max }
    }

    pub fn max_bond(&self) -> usize {
        self.bond_profile().max
    }

    fn check_sample(&self, s: &FeaturizedSample) -> Result<()> {
        if s.sites() != self.sites() || s.dim() != self.phys_dim {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} sites of dimension {}, MPS has {} sites of dimension {}",
                s.sites(),
                s.dim(),
                self.sites(),
                self.phys_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, b: &FeatureBatch) -> Result<()> {
        if b.sites() != self.sites() || b.dim() != self.phys_dim {
            return Err(Error::DimensionMismatch(format!(
                "data has {} sites of dimension {}, MPS has {} sites of dimension {}",
                b.sites(),
                b.dim(),
                self.sites(),
                self.phys_dim
            )));
        }
        Ok(())
    }

    /// `W · Φ(x)` by one left-to-right pass.
    pub fn evaluate(&self, s: &FeaturizedSample) -> Result<f64> {
        if self.label.is_some() {
            return Err(Error::InvalidArgument(
                "labeled MPS: use evaluate_labeled".into(),
            ));
        }
        self.check_sample(s)?;
        Ok(self.evaluate_locals(|j| s.local(j)))
    }

    fn evaluate_locals<'a>(&self, local: impl Fn(usize) -> &'a [f64]) -> f64 {
        let mut v = vec![1.0];
        let mut next = Vec::new();
        for (j, core) in self.cores.iter().enumerate() {
            next.resize(self.right_dim(j), 0.0);
            transfer_left(&v, core, local(j), &mut next);
            std::mem::swap(&mut v, &mut next);
        }
        v[0]
    }

    /// Evaluates every sample of a batch.
    pub fn evaluate_batch(&self, b: &FeatureBatch) -> Result<Vec<f64>> {
        if self.label.is_some() {
            return Err(Error::InvalidArgument(
                "labeled MPS: use evaluate_labeled_batch".into(),
            ));
        }
        self.check_batch(b)?;
        Ok((0..b.len())
            .map(|i| self.evaluate_locals(|j| b.local(i, j)))
            .collect())
    }

    /// Length-`C` output of a labeled MPS.
    pub fn evaluate_labeled(&self, s: &FeaturizedSample) -> Result<Vec<f64>> {
        self.check_sample(s)?;
        self.labeled_locals(|j| s.local(j))
    }

    pub fn evaluate_labeled_batch(&self, b: &FeatureBatch) -> Result<Vec<Vec<f64>>> {
        self.check_batch(b)?;
        (0..b.len())
            .map(|i| self.labeled_locals(|j| b.local(i, j)))
            .collect()
    }

    fn labeled_locals<'a>(&self, local: impl Fn(usize) -> &'a [f64]) -> Result<Vec<f64>> {
        let label = self
            .label
            .ok_or_else(|| Error::InvalidArgument("MPS has no label index".into()))?;
        let mut left = vec![1.0];
        let mut tmp = Vec::new();
        for j in 0..label.site {
            tmp.resize(self.right_dim(j), 0.0);
            transfer_left(&left, &self.cores[j], local(j), &mut tmp);
            std::mem::swap(&mut left, &mut tmp);
        }
        let mut right = vec![1.0];
        for j in (label.site + 1..self.sites()).rev() {
            tmp.resize(self.left_dim(j), 0.0);
            transfer_right(&right, &self.cores[j], local(j), &mut tmp);
            std::mem::swap(&mut right, &mut tmp);
        }
        let core = &self.cores[label.site];
        let [l_dim, f, c_dim, r_dim] = [
            core.shape()[0],
            core.shape()[1],
            core.shape()[2],
            core.shape()[3],
        ];
        let phi = local(label.site);
        let data = core.data();
        let mut out = vec![0.0; c_dim];
        for l in 0..l_dim {
            for s in 0..f {
                let w = left[l] * phi[s];
                if w == 0.0 {
                    continue;
                }
                for (c, o) in out.iter_mut().enumerate() {
                    let base = ((l * f + s) * c_dim + c) * r_dim;
                    let dot: f64 = data[base..base + r_dim]
                        .iter()
                        .zip(&right)
                        .map(|(a, b)| a * b)
                        .sum();
                    *o += w * dot;
                }
            }
        }
        Ok(out)
    }

    /// Contracts all bonds into the full weight tensor.
    ///
    /// The result has one extent-`f` axis per site; a labeled MPS gets its
    /// extent-`C` axis right after the label site's physical axis.
    pub fn to_full_tensor(&self) -> Result<DenseTensor> {
        let total = (self.phys_dim as f64).powi(self.sites() as i32) * self.classes() as f64;
        if total > FULL_TENSOR_LIMIT as f64 {
            return Err(Error::Capacity(format!(
                "full tensor would hold {total:.0} entries (limit {FULL_TENSOR_LIMIT})"
            )));
        }
        // acc has shape (open physical axes..., bond)
        let mut acc = DenseTensor::new(vec![1], vec![1.0])?;
        for core in &self.cores {
            let bond_axis = acc.order() - 1;
            acc = crate::tensor::contract(&acc, core, &[(bond_axis, 0)])?;
        }
        let shape = acc.shape()[..acc.order() - 1].to_vec();
        acc.reshape(shape)
    }

    /// Builds an MPS from a full `(f, …, f)` tensor by sequential truncated
    /// SVDs, left to right.
    pub fn compress(t: &DenseTensor, max_bond: usize, cutoff: f64) -> Result<Compressed> {
        let n = t.order();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "cannot compress an order-0 tensor".into(),
            ));
        }
        let f = t.shape()[0];
        if t.shape().iter().any(|&d| d != f) {
            return Err(Error::DimensionMismatch(format!(
                "compress expects equal physical extents, got {:?}",
                t.shape()
            )));
        }
        let mut cores = Vec::with_capacity(n);
        let mut discarded = Vec::with_capacity(n.saturating_sub(1));
        let mut rest: DMatrix<f64> = DMatrix::from_row_slice(1, t.len(), t.data());
        let mut left = 1;
        for _ in 0..n - 1 {
            let cols = rest.ncols() / f;
            let m = reshape_row_major(&rest, left * f, cols);
            let svd = svd_truncate(&m, max_bond, cutoff)?;
            let k = svd.rank();
            cores.push(DenseTensor::from_matrix(&svd.left, vec![left, f, k])?);
            let mut sv = svd.right;
            for (r, s) in svd.singular_values.iter().enumerate() {
                sv.row_mut(r).scale_mut(*s);
            }
            rest = sv;
            discarded.push(svd.discarded_weight);
            left = k;
        }
        cores.push(DenseTensor::from_matrix(&rest, vec![left, f, 1])?);
        let mut mps = Self::new(cores, None)?;
        mps.gauge = Gauge::Mixed(n - 1);
        Ok(Compressed { mps, discarded })
    }

    /// Brings the MPS into mixed canonical form around `center` using QR
    /// factorizations. The represented tensor is unchanged.
    pub fn canonicalize(&self, center: usize) -> Result<Self> {
        if center >= self.sites() {
            return Err(Error::InvalidArgument(format!(
                "center {center} out of range for {} sites",
                self.sites()
            )));
        }
        let mut out = self.clone();
        for j in 0..center {
            out.shift_orthogonality_right(j)?;
        }
        for j in (center + 1..self.sites()).rev() {
            out.shift_orthogonality_left(j)?;
        }
        out.gauge = Gauge::Mixed(center);
        Ok(out)
    }

    /// Makes core `j` left-orthonormal and pushes the remainder into `j + 1`.
    pub(crate) fn shift_orthogonality_right(&mut self, j: usize) -> Result<()> {
        let core = &self.cores[j];
        let order = core.order();
        let m = core.to_matrix(order - 1);
        let qr = m.qr();
        let q = qr.q();
        let r = qr.r();
        let mut shape = core.shape().to_vec();
        shape[order - 1] = q.ncols();
        self.cores[j] = DenseTensor::from_matrix(&q, shape)?;
        let next = &self.cores[j + 1];
        let nm = next.to_matrix(1);
        let mut nshape = next.shape().to_vec();
        nshape[0] = r.nrows();
        self.cores[j + 1] = DenseTensor::from_matrix(&(r * nm), nshape)?;
        self.gauge = Gauge::None;
        Ok(())
    }

    /// Makes core `j` right-orthonormal and pushes the remainder into `j − 1`.
    pub(crate) fn shift_orthogonality_left(&mut self, j: usize) -> Result<()> {
        let core = &self.cores[j];
        let m = core.to_matrix(1).transpose();
        let qr = m.qr();
        let q = qr.q().transpose();
        let r = qr.r().transpose();
        let mut shape = core.shape().to_vec();
        shape[0] = q.nrows();
        self.cores[j] = DenseTensor::from_matrix(&q, shape)?;
        let prev = &self.cores[j - 1];
        let order = prev.order();
        let pm = prev.to_matrix(order - 1);
        let mut pshape = prev.shape().to_vec();
        pshape[order - 1] = r.ncols();
        self.cores[j - 1] = DenseTensor::from_matrix(&(pm * r), pshape)?;
        self.gauge = Gauge::None;
        Ok(())
    }

    /// Largest deviation of core `j` from left-orthonormality.
    pub fn left_orthonormality_error(&self, j: usize) -> f64 {
        let core = &self.cores[j];
        let m = core.to_matrix(core.order() - 1);
        let g = m.transpose() * &m;
        (g - DMatrix::identity(m.ncols(), m.ncols())).amax()
    }

    pub fn right_orthonormality_error(&self, j: usize) -> f64 {
        let m = self.cores[j].to_matrix(1);
        let g = &m * m.transpose();
        (g - DMatrix::identity(m.nrows(), m.nrows())).amax()
    }

    /// Caps every bond at `max_bond` without forming the full tensor.
    pub fn truncate(&self, max_bond: usize) -> Result<Self> {
        Ok(self.truncate_with_weight(max_bond)?.mps)
    }

    pub fn truncate_with_weight(&self, max_bond: usize) -> Result<Compressed> {
        if max_bond == 0 {
            return Err(Error::InvalidArgument("max_bond must be ≥ 1".into()));
        }
        let mut w = self.canonicalize(0)?;
        let mut discarded = Vec::with_capacity(self.sites() - 1);
        for j in 0..self.sites() - 1 {
            let core = &w.cores[j];
            let order = core.order();
            let m = core.to_matrix(order - 1);
            let svd = svd_truncate(&m, max_bond, 0.0)?;
            let k = svd.rank();
            let mut shape = core.shape().to_vec();
            shape[order - 1] = k;
            w.cores[j] = DenseTensor::from_matrix(&svd.left, shape)?;
            let mut sv = svd.right;
            for (r, s) in svd.singular_values.iter().enumerate() {
                sv.row_mut(r).scale_mut(*s);
            }
            let next = &w.cores[j + 1];
            let mut nshape = next.shape().to_vec();
            nshape[0] = k;
            w.cores[j + 1] = DenseTensor::from_matrix(&(sv * next.to_matrix(1)), nshape)?;
            discarded.push(svd.discarded_weight);
        }
        w.gauge = Gauge::Mixed(self.sites() - 1);
        Ok(Compressed { mps: w, discarded })
    }

    /// `⟨self, other⟩` summed over all physical (and class) indices.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        if self.sites() != other.sites()
            || self.phys_dim != other.phys_dim
            || self.label != other.label
        {
            return Err(Error::DimensionMismatch("MPS structures differ".into()));
        }
        // env[a, b]: a indexes self's bond, b indexes other's bond.
        let mut env = DMatrix::from_element(1, 1, 1.0);
        for (a, b) in self.cores.iter().zip(&other.cores) {
            let am = a.to_matrix(1); // (la, f·C·ra)
            let bm = b.to_matrix(1);
            let ra = self_right(a);
            let rb = self_right(b);
            // t = envᵀ·a : (lb, f·C·ra)
            let t = env.transpose() * am;
            let phys = t.ncols() / ra;
            let mut next = DMatrix::zeros(ra, rb);
            for lb in 0..t.nrows() {
                for p in 0..phys {
                    for x in 0..ra {
                        let tv = t[(lb, p * ra + x)];
                        if tv == 0.0 {
                            continue;
                        }
                        for y in 0..rb {
                            next[(x, y)] += tv * bm[(lb, p * rb + y)];
                        }
                    }
                }
            }
            env = next;
        }
        Ok(env[(0, 0)])
    }

    pub fn norm_squared(&self) -> f64 {
        self.inner(self).expect("same structure")
    }

    /// Gaussian cores with standard deviation `scale`; bond `j` is capped at
    /// `min(χ, dim left of j, dim right of j)`.
    pub fn random_init(
        sites: usize,
        phys_dim: usize,
        chi: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::random_init_labeled(sites, phys_dim, chi, scale, seed, None)
    }

    pub fn random_init_labeled(
        sites: usize,
        phys_dim: usize,
        chi: usize,
        scale: f64,
        seed: u64,
        label: Option<LabelSite>,
    ) -> Result<Self> {
        if sites == 0 || phys_dim == 0 || chi == 0 {
            return Err(Error::InvalidArgument(
                "random_init needs sites, phys_dim and chi ≥ 1".into(),
            ));
        }
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("bad init scale {scale}")));
        }
        let bonds = maximal_bonds(sites, phys_dim, label, chi);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut cores = Vec::with_capacity(sites);
        for j in 0..sites {
            let l = if j == 0 { 1 } else { bonds[j - 1] };
            let r = if j + 1 == sites { 1 } else { bonds[j] };
            let shape = match label {
                Some(lab) if lab.site == j => vec![l, phys_dim, lab.classes, r],
                _ => vec![l, phys_dim, r],
            };
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| scale * normal.sample(&mut rng)).collect();
            cores.push(DenseTensor::new(shape, data)?);
        }
        Self::new(cores, label)
    }

    /// Writes the versioned text checkpoint format.
    ///
    /// ```text
    /// mpslab-mps 1
    /// sites <N>
    /// phys <f>
    /// label none | label <site> <C>
    /// bonds <χ_0> … <χ_{N−2}>
    /// core <j> <extents…>
    /// <entries in row-major order, space separated>
    /// ```
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "mpslab-mps 1")?;
        writeln!(out, "sites {}", self.sites())?;
        writeln!(out, "phys {}", self.phys_dim)?;
        match self.label {
            None => writeln!(out, "label none")?,
            Some(l) => writeln!(out, "label {} {}", l.site, l.classes)?,
        }
        let dims: Vec<String> = self
            .bond_profile()
            .dims
            .iter()
            .map(ToString::to_string)
            .collect();
        writeln!(out, "bonds {}", dims.join(" "))?;
        for (j, core) in self.cores.iter().enumerate() {
            let shape: Vec<String> = core.shape().iter().map(ToString::to_string).collect();
            writeln!(out, "core {j} {}", shape.join(" "))?;
            let mut line = String::with_capacity(core.len() * 24);
            for (k, x) in core.data().iter().enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                write!(line, "{x:e}").expect("write to string");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Parse(format!("unexpected end of MPS file, expected {what}")))
        };
        let header = next("header")?;
        if header.trim() != "mpslab-mps 1" {
            return Err(Error::Parse(format!("unsupported MPS header {header:?}")));
        }
        let sites = keyed_usizes(&next("sites")?, "sites")?;
        let phys = keyed_usizes(&next("phys")?, "phys")?;
        let (sites, _phys) = (single(&sites)?, single(&phys)?);
        let label_line = next("label")?;
        let label = match label_line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["label", "none"] => None,
            ["label", s, c] => Some(LabelSite {
                site: parse_usize(s)?,
                classes: parse_usize(c)?,
            }),
            _ => return Err(Error::Parse(format!("bad label line {label_line:?}"))),
        };
        let bonds = keyed_usizes(&next("bonds")?, "bonds")?;
        let mut cores = Vec::with_capacity(sites);
        for j in 0..sites {
            let head = keyed_usizes(&next("core header")?, "core")?;
            if head.first() != Some(&j) {
                return Err(Error::Parse(format!("expected core {j}")));
            }
            let shape = head[1..].to_vec();
            let values = next("core values")?
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("{v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            cores.push(DenseTensor::new(shape, values)?);
        }
        let mps = Self::new(cores, label)?;
        if mps.bond_profile().dims != bonds {
            return Err(Error::Parse(
                "bond profile does not match core shapes".into(),
            ));
        }
        Ok(mps)
    }
}

fn self_right(core: &DenseTensor) -> usize {
    *core.shape().last().unwrap()
}

/// Bond caps `min(χ, left dimension, right dimension)` for each of the
/// `sites − 1` bonds; a label axis counts towards the side that holds it.
pub fn maximal_bonds(
    sites: usize,
    phys_dim: usize,
    label: Option<LabelSite>,
    chi: usize,
) -> Vec<usize> {
    (0..sites.saturating_sub(1))
        .map(|j| {
            let mut left = 1usize;
            for k in 0..=j {
                left = left.saturating_mul(phys_dim);
                if label.is_some_and(|l| l.site == k) {
                    left = left.saturating_mul(label.unwrap().classes);
                }
            }
            let mut right = 1usize;
            for k in j + 1..sites {
                right = right.saturating_mul(phys_dim);
                if label.is_some_and(|l| l.site == k) {
                    right = right.saturating_mul(label.unwrap().classes);
                }
            }
            chi.min(left).min(right)
        })
        .collect()
}

/// `out[r] = Σ_{l,s} v[l] φ[s] A[l,s,r]` for an order-3 core.
#[inline]
pub(crate) fn transfer_left(v: &[f64], core: &DenseTensor, phi: &[f64], out: &mut [f64]) {
    let s = core.shape();
    let (l_dim, f, r_dim) = (s[0], s[1], s[s.len() - 1]);
    debug_assert_eq!(s.len(), 3);
    let data = core.data();
    out.iter_mut().for_each(|o| *o = 0.0);
    for l in 0..l_dim {
        let vl = v[l];
        if vl == 0.0 {
            continue;
        }
        for k in 0..f {
            let w = vl * phi[k];
            if w == 0.0 {
                continue;
            }
            let row = &data[(l * f + k) * r_dim..(l * f + k + 1) * r_dim];
            for (o, a) in out.iter_mut().zip(row) {
                *o += w * a;
            }
        }
    }
}

/// `out[l] = Σ_{s,r} A[l,s,r] φ[s] v[r]` for an order-3 core.
#[inline]
pub(crate) fn transfer_right(v: &[f64], core: &DenseTensor, phi: &[f64], out: &mut [f64]) {
    let s = core.shape();
    let (l_dim, f, r_dim) = (s[0], s[1], s[s.len() - 1]);
    debug_assert_eq!(s.len(), 3);
    let data = core.data();
    for (l, o) in out.iter_mut().enumerate().take(l_dim) {
        let mut acc = 0.0;
        for k in 0..f {
            if phi[k] == 0.0 {
                continue;
            }
            let row = &data[(l * f + k) * r_dim..(l * f + k + 1) * r_dim];
            let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            acc += phi[k] * dot;
        }
        *o = acc;
    }
}

fn reshape_row_major(m: &DMatrix<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut flat = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        flat.extend(m.row(r).iter());
    }
    DMatrix::from_row_slice(rows, cols, &flat)
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

fn keyed_usizes(line: &str, key: &str) -> Result<Vec<usize>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Parse(format!("expected {key:?} line, got {line:?}")));
    }
    parts.map(parse_usize).collect()
}

fn single(v: &[usize]) -> Result<usize> {
    match v {
        [x] => Ok(*x),
        _ => Err(Error::Parse(format!("expected one value, got {v:?}"))),
    }
}
