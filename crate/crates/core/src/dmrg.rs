//! Single-site sweeping optimization.
//!
//! With every core except the center left- or right-orthonormal, the model
//! output is linear in the center core, so each site update is a small
//! smooth problem. It is solved with a few steps of Polak–Ribière+ nonlinear
//! conjugate gradient and an Armijo backtracking line search. Per-sample left
//! and right partial contractions ("environments") are cached and updated
//! incrementally as the center moves.
//!
//! The label axis of a classifier stays on its own site. Environments on the
//! far side of it carry one row per class.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::feature_map::{FeatureBatch, FeatureMap};
use crate::mps::{Gauge, Mps};
use crate::tensor::DenseTensor;

/// Samples per parallel work unit. Partial sums are combined in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 64;

/// Probability floor inside the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-300;

/// Per-update loss increase tolerated as round-off.
pub const MONOTONE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1/2T) Σ ‖f(x) − y‖²`; class targets are one-hot.
    Mse,
    /// `−(1/T) Σ ln p_y` with `p_c = f_c² / Σ f²`.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    BestValidation,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Full sweeps, each left→right then right→left.
    pub sweeps: usize,
    pub cg_steps: usize,
    pub lambda: f64,
    pub loss_kind: LossKind,
    pub checkpoint: Checkpoint,
    /// Stop once a sweep lowers the training objective by less than this.
    pub early_stop: Option<f64>,
    pub armijo_c: f64,
    pub max_halvings: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sweeps: 50,
            cg_steps: 5,
            lambda: 1e-6,
            loss_kind: LossKind::Mse,
            checkpoint: Checkpoint::BestValidation,
            early_stop: Some(1e-10),
            armijo_c: 1e-4,
            max_halvings: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.cg_steps == 0 {
            return Err(Error::InvalidArgument(
                "sweeps and cg_steps must be ≥ 1".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "λ must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidArgument(
                "Armijo constant must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Standard deviation for random initialization, `1/√(fχ)`.
pub fn default_init_scale(phys_dim: usize, chi: usize) -> f64 {
    1.0 / ((phys_dim * chi) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Values(Vec<f64>),
    Classes { labels: Vec<usize>, classes: usize },
}

/// Featurized inputs paired with regression or class targets.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub batch: FeatureBatch,
    pub targets: Targets,
}

impl TrainingData {
    pub fn regression(batch: FeatureBatch, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                batch.len()
            )));
        }
        Ok(Self {
            batch,
            targets: Targets::Values(labels),
        })
    }

    pub fn classification(batch: FeatureBatch, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                batch.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} ≥ {classes} classes"
            )));
        }
        Ok(Self {
            batch,
            targets: Targets::Classes { labels, classes },
        })
    }

    pub fn from_dataset(d: &Dataset, map: &FeatureMap) -> Result<Self> {
        Self::regression(d.featurize(map)?, d.labels.clone())
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// Output length of a compatible model.
    pub fn outputs(&self) -> usize {
        match &self.targets {
            Targets::Values(_) => 1,
            Targets::Classes { classes, .. } => *classes,
        }
    }

    fn check(&self, w: &Mps, kind: LossKind) -> Result<()> {
        w.check_batch(&self.batch)?;
        match (&self.targets, w.label()) {
            (Targets::Values(_), None) if kind == LossKind::Mse => Ok(()),
            (Targets::Values(_), _) => Err(Error::InvalidArgument(
                "regression targets need an unlabeled MPS and the MSE loss".into(),
            )),
            (Targets::Classes { classes, .. }, Some(l)) if l.classes == *classes => Ok(()),
            (Targets::Classes { classes, .. }, _) => Err(Error::InvalidArgument(format!(
                "class targets need an MPS with a {classes}-class label index"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Per-sample losses. All are without the 1/T factor.

fn sample_loss(kind: LossKind, t: &Targets, i: usize, v: &[f64]) -> f64 {
    match (kind, t) {
        (_, Targets::Values(y)) => 0.5 * (v[0] - y[i]).powi(2),
        (LossKind::Mse, Targets::Classes { labels, .. }) => {
            let y = labels[i];
            0.5 * v
                .iter()
                .enumerate()
                .map(|(c, x)| (x - if c == y { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
        }
        (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
            let s: f64 = v.iter().map(|x| x * x).sum();
            let p = if s > 0.0 {
                v[labels[i]].powi(2) / s
            } else {
                0.0
            };
            -p.max(PROB_FLOOR).ln()
        }
    }
}

fn sample_dloss(kind: LossKind, t: &Targets, i: usize, v: &[f64], g: &mut [f64]) {
    match (kind, t) {
        (_, Targets::Values(y)) => g[0] = v[0] - y[i],
        (LossKind::Mse, Targets::Classes { labels, .. }) => {
            for (c, (gc, x)) in g.iter_mut().zip(v).enumerate() {
                *gc = x - if c == labels[i] { 1.0 } else { 0.0 };
            }
        }
        (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
            let y = labels[i];
            let s: f64 = v.iter().map(|x| x * x).sum();
            if s == 0.0 {
                g.iter_mut().for_each(|x| *x = 0.0);
                return;
            }
            for (gc, x) in g.iter_mut().zip(v) {
                *gc = 2.0 * x / s;
            }
            // Where the probability sits on the floor the loss is flat in v_y.
            if v[y] != 0.0 && v[y] * v[y] / s >= PROB_FLOOR {
                g[y] -= 2.0 / v[y];
            }
        }
    }
}

/// Second directional derivative `qᵀ ∇²ℓ q`.
fn sample_curvature(kind: LossKind, t: &Targets, i: usize, v: &[f64], q: &[f64]) -> f64 {
    match (kind, t) {
        (LossKind::Mse, _) => q.iter().map(|x| x * x).sum(),
        (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
            let y = labels[i];
            let s: f64 = v.iter().map(|x| x * x).sum();
            if s == 0.0 || v[y] == 0.0 {
                return 0.0;
            }
            let qq: f64 = q.iter().map(|x| x * x).sum();
            let vq: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            2.0 * q[y] * q[y] / (v[y] * v[y]) + 2.0 * qq / s - 4.0 * vq * vq / (s * s)
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => q[0] * q[0],
    }
}

/// Ordered parallel sum of `f(i)` over `0..n`.
fn ordered_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partial: Vec<f64> = starts
        .par_iter()
        .map(|&s| (s..(s + CHUNK).min(n)).map(&f).sum())
        .collect();
    partial.iter().sum()
}

/// Model outputs, `T × C` row-major.
pub fn model_outputs(w: &Mps, batch: &FeatureBatch) -> Result<Vec<f64>> {
    w.check_batch(batch)?;
    let c = w.classes();
    let mut out = vec![0.0; batch.len() * c];
    let labeled = w.label().is_some();
    out.par_chunks_mut(c)
        .enumerate()
        .try_for_each(|(i, o)| -> Result<()> {
            if labeled {
                o.copy_from_slice(&w.evaluate_labeled(&batch.get(i))?);
            } else {
                o[0] = w.evaluate(&batch.get(i))?;
            }
            Ok(())
        })?;
    Ok(out)
}

fn data_loss_from_outputs(kind: LossKind, data: &TrainingData, outs: &[f64], c: usize) -> f64 {
    let t = data.len();
    ordered_sum(t, |i| {
        sample_loss(kind, &data.targets, i, &outs[i * c..(i + 1) * c])
    }) / t as f64
}

/// Mean data term without regularization: `(1/2T)Σ(f−y)²` or the mean
/// cross-entropy.
pub fn data_loss(w: &Mps, data: &TrainingData, kind: LossKind) -> Result<f64> {
    data.check(w, kind)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let outs = model_outputs(w, &data.batch)?;
    Ok(data_loss_from_outputs(kind, data, &outs, w.classes()))
}

/// Training objective: data term plus `(λ/2)‖W‖²`, the norm taken from the
/// MPS inner product.
pub fn loss(w: &Mps, data: &TrainingData, kind: LossKind, lambda: f64) -> Result<f64> {
    Ok(data_loss(w, data, kind)? + 0.5 * lambda * w.norm_squared())
}

/// `(1/T)Σ(f−y)²` for regression data.
pub fn mean_squared_error(w: &Mps, data: &TrainingData) -> Result<f64> {
    Ok(2.0 * data_loss(w, data, LossKind::Mse)?)
}

// ---------------------------------------------------------------------------
// Environments.

#[derive(Clone, Copy, Debug)]
struct CoreDims {
    l: usize,
    f: usize,
    c: usize,
    r: usize,
}

fn dims_of(core: &DenseTensor) -> CoreDims {
    let s = core.shape();
    if s.len() == 4 {
        CoreDims {
            l: s[0],
            f: s[1],
            c: s[2],
            r: s[3],
        }
    } else {
        CoreDims {
            l: s[0],
            f: s[1],
            c: 1,
            r: s[2],
        }
    }
}

/// `out[c, r] = Σ_{l,s} env[c, l] φ_s A[l, s, c, r]`, broadcasting whichever
/// side has a single class row.
fn left_step(env: &[f64], rows: usize, a: &[f64], d: CoreDims, phi: &[f64], out: &mut [f64]) {
    let rows_out = rows.max(d.c);
    out[..rows_out * d.r].iter_mut().for_each(|x| *x = 0.0);
    for co in 0..rows_out {
        let ce = if rows > 1 { co } else { 0 };
        let ca = if d.c > 1 { co } else { 0 };
        let o = &mut out[co * d.r..(co + 1) * d.r];
        for l in 0..d.l {
            let e = env[ce * d.l + l];
            if e == 0.0 {
                continue;
            }
            for (s, &p) in phi.iter().enumerate() {
                let wgt = e * p;
                if wgt == 0.0 {
                    continue;
                }
                let base = ((l * d.f + s) * d.c + ca) * d.r;
                for (x, y) in o.iter_mut().zip(&a[base..base + d.r]) {
                    *x += wgt * y;
                }
            }
        }
    }
}

/// `out[c, l] = Σ_{s,r} A[l, s, c, r] φ_s env[c, r]`.
fn right_step(env: &[f64], rows: usize, a: &[f64], d: CoreDims, phi: &[f64], out: &mut [f64]) {
    let rows_out = rows.max(d.c);
    for co in 0..rows_out {
        let ce = if rows > 1 { co } else { 0 };
        let ca = if d.c > 1 { co } else { 0 };
        let e = &env[ce * d.r..(ce + 1) * d.r];
        for l in 0..d.l {
            let mut acc = 0.0;
            for (s, &p) in phi.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let base = ((l * d.f + s) * d.c + ca) * d.r;
                let dot: f64 = a[base..base + d.r].iter().zip(e).map(|(x, y)| x * y).sum();
                acc += p * dot;
            }
            out[co * d.l + l] = acc;
        }
    }
}

#[derive(Clone, Debug)]
struct Env {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Hash of the core this environment was last extended with.
    stamp: u64,
}

impl Env {
    fn ones(samples: usize) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![1.0; samples],
            stamp: 0,
        }
    }

    fn stride(&self) -> usize {
        self.rows * self.cols
    }

    fn sample(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }
}

fn core_stamp(core: &DenseTensor) -> u64 {
    let mut h = DefaultHasher::new();
    core.shape().hash(&mut h);
    for x in core.data() {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Per-sample partial contractions to the left and right of the center.
///
/// `lefts[j]` contracts sites `0..j`, `rights[j]` contracts sites `j..N`.
/// Only `lefts[0..=center]` and `rights[center+1..=N]` are kept.
#[derive(Clone, Debug)]
pub struct EnvironmentCache {
    center: usize,
    samples: usize,
    lefts: Vec<Option<Env>>,
    rights: Vec<Option<Env>>,
}

impl EnvironmentCache {
    pub fn new(w: &Mps, batch: &FeatureBatch, center: usize) -> Result<Self> {
        w.check_batch(batch)?;
        let n = w.sites();
        if center >= n {
            return Err(Error::InvalidArgument(format!(
                "center {center} outside {n} sites"
            )));
        }
        let t = batch.len();
        let mut lefts = vec![None; n + 1];
        let mut rights = vec![None; n + 1];
        lefts[0] = Some(Env::ones(t));
        rights[n] = Some(Env::ones(t));
        for j in 0..center {
            let next = extend_left(lefts[j].as_ref().unwrap(), w.core(j), j, batch);
            lefts[j + 1] = Some(next);
        }
        for j in (center + 1..n).rev() {
            let next = extend_right(rights[j + 1].as_ref().unwrap(), w.core(j), j, batch);
            rights[j] = Some(next);
        }
        Ok(Self {
            center,
            samples: t,
            lefts,
            rights,
        })
    }

    pub fn center(&self) -> usize {
        self.center
    }

    fn left(&self) -> &Env {
        self.lefts[self.center]
            .as_ref()
            .expect("left environment kept")
    }

    fn right(&self) -> &Env {
        self.rights[self.center + 1]
            .as_ref()
            .expect("right environment kept")
    }

    /// Verifies that the cache was built from the current cores of `w` and
    /// that `w` is in mixed gauge at `site`.
    pub fn check(&self, w: &Mps, site: usize, batch: &FeatureBatch) -> Result<()> {
        if site != self.center {
            return Err(Error::StaleCache(format!(
                "cache centered at {}, asked for site {site}",
                self.center
            )));
        }
        if w.gauge() != Gauge::Mixed(site) {
            return Err(Error::StaleCache(format!(
                "MPS gauge {:?} is not mixed at site {site}",
                w.gauge()
            )));
        }
        if batch.len() != self.samples || self.lefts.len() != w.sites() + 1 {
            return Err(Error::StaleCache(
                "cache built for a different dataset or MPS".into(),
            ));
        }
        for j in 1..=site {
            if self.lefts[j].as_ref().map(|e| e.stamp) != Some(core_stamp(w.core(j - 1))) {
                return Err(Error::StaleCache(format!(
                    "left environment {j} is out of date"
                )));
            }
        }
        for j in site + 1..w.sites() {
            if self.rights[j].as_ref().map(|e| e.stamp) != Some(core_stamp(w.core(j))) {
                return Err(Error::StaleCache(format!(
                    "right environment {j} is out of date"
                )));
            }
        }
        Ok(())
    }

    /// Moves the orthogonality center one site right, updating `w` and the
    /// environments.
    pub fn move_right(&mut self, w: &mut Mps, batch: &FeatureBatch) -> Result<()> {
        let c = self.center;
        if c + 1 >= w.sites() {
            return Err(Error::InvalidArgument(
                "center already at the right end".into(),
            ));
        }
        w.shift_orthogonality_right(c)?;
        w.set_gauge(Gauge::Mixed(c + 1));
        let next = extend_left(self.lefts[c].as_ref().expect("kept"), w.core(c), c, batch);
        self.lefts[c + 1] = Some(next);
        self.rights[c + 1] = None;
        self.center = c + 1;
        Ok(())
    }

    pub fn move_left(&mut self, w: &mut Mps, batch: &FeatureBatch) -> Result<()> {
        let c = self.center;
        if c == 0 {
            return Err(Error::InvalidArgument(
                "center already at the left end".into(),
            ));
        }
        w.shift_orthogonality_left(c)?;
        w.set_gauge(Gauge::Mixed(c - 1));
        let next = extend_right(
            self.rights[c + 1].as_ref().expect("kept"),
            w.core(c),
            c,
            batch,
        );
        self.rights[c] = Some(next);
        self.lefts[c] = None;
        self.center = c - 1;
        Ok(())
    }

    /// Model outputs recombined from the environments and the center core,
    /// `T × C` row-major.
    pub fn outputs(&self, w: &Mps, batch: &FeatureBatch) -> Result<Vec<f64>> {
        self.check(w, self.center, batch)?;
        let core = w.core(self.center);
        Ok(apply(
            self.left(),
            self.right(),
            core.data(),
            dims_of(core),
            self.center,
            batch,
        ))
    }
}

fn extend_left(prev: &Env, core: &DenseTensor, site: usize, batch: &FeatureBatch) -> Env {
    let d = dims_of(core);
    let rows = prev.rows.max(d.c);
    let stride = rows * d.r;
    let mut data = vec![0.0; batch.len() * stride];
    data.par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, out)| {
            left_step(
                prev.sample(i),
                prev.rows,
                core.data(),
                d,
                batch.local(i, site),
                out,
            );
        });
    Env {
        rows,
        cols: d.r,
        data,
        stamp: core_stamp(core),
    }
}

fn extend_right(prev: &Env, core: &DenseTensor, site: usize, batch: &FeatureBatch) -> Env {
    let d = dims_of(core);
    let rows = prev.rows.max(d.c);
    let stride = rows * d.l;
    let mut data = vec![0.0; batch.len() * stride];
    data.par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, out)| {
            right_step(
                prev.sample(i),
                prev.rows,
                core.data(),
                d,
                batch.local(i, site),
                out,
            );
        });
    Env {
        rows,
        cols: d.l,
        data,
        stamp: core_stamp(core),
    }
}

fn output_rows(left: &Env, right: &Env, d: CoreDims) -> usize {
    left.rows.max(right.rows).max(d.c)
}

/// Outputs for center-core values `a`; linear in `a`.
fn apply(
    left: &Env,
    right: &Env,
    a: &[f64],
    d: CoreDims,
    site: usize,
    batch: &FeatureBatch,
) -> Vec<f64> {
    let c = output_rows(left, right, d);
    let mut outs = vec![0.0; batch.len() * c];
    outs.par_chunks_mut(c).enumerate().for_each_init(
        || vec![0.0; c.max(1) * d.l.max(d.r)],
        |tmp, (i, o)| {
            let (le, re, phi) = (left.sample(i), right.sample(i), batch.local(i, site));
            if left.rows > 1 {
                // Label on the left: contract the right side first.
                right_step(re, 1, a, d, phi, tmp);
                for (k, ok) in o.iter_mut().enumerate() {
                    *ok = le[k * d.l..(k + 1) * d.l]
                        .iter()
                        .zip(tmp.iter())
                        .map(|(x, y)| x * y)
                        .sum();
                }
            } else {
                left_step(le, 1, a, d, phi, tmp);
                let trows = d.c;
                for (k, ok) in o.iter_mut().enumerate() {
                    let t = &tmp[(if trows > 1 { k } else { 0 }) * d.r..][..d.r];
                    let r = &re[(if right.rows > 1 { k } else { 0 }) * d.r..][..d.r];
                    *ok = t.iter().zip(r).map(|(x, y)| x * y).sum();
                }
            }
        },
    );
    outs
}

/// `Σ_i Σ_c g[i,c] ∂out[i,c]/∂A`, reduced in chunk order.
fn adjoint(
    left: &Env,
    right: &Env,
    g: &[f64],
    d: CoreDims,
    site: usize,
    batch: &FeatureBatch,
) -> Vec<f64> {
    let c = output_rows(left, right, d);
    let size = d.l * d.f * d.c * d.r;
    let t = batch.len();
    let starts: Vec<usize> = (0..t).step_by(CHUNK).collect();
    let partials: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = vec![0.0; size];
            let mut lv = vec![0.0; d.l];
            let mut rv = vec![0.0; d.r];
            for i in s..(s + CHUNK).min(t) {
                let gi = &g[i * c..(i + 1) * c];
                let (le, re, phi) = (left.sample(i), right.sample(i), batch.local(i, site));
                for ca in 0..d.c {
                    if d.c > 1 {
                        lv.copy_from_slice(&le[..d.l]);
                        lv.iter_mut().for_each(|x| *x *= gi[ca]);
                        rv.copy_from_slice(&re[..d.r]);
                    } else if left.rows > 1 {
                        lv.iter_mut().for_each(|x| *x = 0.0);
                        for (k, gk) in gi.iter().enumerate() {
                            for (x, y) in lv.iter_mut().zip(&le[k * d.l..(k + 1) * d.l]) {
                                *x += gk * y;
                            }
                        }
                        rv.copy_from_slice(&re[..d.r]);
                    } else if right.rows > 1 {
                        lv.copy_from_slice(&le[..d.l]);
                        rv.iter_mut().for_each(|x| *x = 0.0);
                        for (k, gk) in gi.iter().enumerate() {
                            for (x, y) in rv.iter_mut().zip(&re[k * d.r..(k + 1) * d.r]) {
                                *x += gk * y;
                            }
                        }
                    } else {
                        lv.copy_from_slice(&le[..d.l]);
                        lv.iter_mut().for_each(|x| *x *= gi[0]);
                        rv.copy_from_slice(&re[..d.r]);
                    }
                    for (l, &x) in lv.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (s, &p) in phi.iter().enumerate() {
                            let wgt = x * p;
                            if wgt == 0.0 {
                                continue;
                            }
                            let base = ((l * d.f + s) * d.c + ca) * d.r;
                            for (o, y) in acc[base..base + d.r].iter_mut().zip(&rv) {
                                *o += wgt * y;
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; size];
    for p in partials {
        for (x, y) in total.iter_mut().zip(p) {
            *x += y;
        }
    }
    total
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Site problem: objective and gradient as functions of the center core.
struct SiteProblem<'a> {
    left: &'a Env,
    right: &'a Env,
    dims: CoreDims,
    site: usize,
    data: &'a TrainingData,
    kind: LossKind,
    lambda: f64,
    rows: usize,
}

impl SiteProblem<'_> {
    fn outputs(&self, a: &[f64]) -> Vec<f64> {
        apply(
            self.left,
            self.right,
            a,
            self.dims,
            self.site,
            &self.data.batch,
        )
    }

    fn objective(&self, a: &[f64], outs: &[f64]) -> f64 {
        data_loss_from_outputs(self.kind, self.data, outs, self.rows)
            + 0.5 * self.lambda * dot(a, a)
    }

    fn gradient(&self, a: &[f64], outs: &[f64]) -> Vec<f64> {
        let t = self.data.len();
        let c = self.rows;
        let mut g = vec![0.0; outs.len()];
        g.par_chunks_mut(c).enumerate().for_each(|(i, gi)| {
            sample_dloss(
                self.kind,
                &self.data.targets,
                i,
                &outs[i * c..(i + 1) * c],
                gi,
            );
        });
        let inv_t = 1.0 / t as f64;
        g.iter_mut().for_each(|x| *x *= inv_t);
        let mut grad = adjoint(
            self.left,
            self.right,
            &g,
            self.dims,
            self.site,
            &self.data.batch,
        );
        for (x, y) in grad.iter_mut().zip(a) {
            *x += self.lambda * y;
        }
        grad
    }

    /// Objective along `a + α d` given the outputs `o` at `a` and `q` at `d`.
    fn line(&self, a: &[f64], d: &[f64], o: &[f64], q: &[f64], alpha: f64) -> f64 {
        let c = self.rows;
        let t = self.data.len();
        let data = ordered_sum(t, |i| {
            let v: Vec<f64> = (0..c)
                .map(|k| o[i * c + k] + alpha * q[i * c + k])
                .collect();
            sample_loss(self.kind, &self.data.targets, i, &v)
        }) / t as f64;
        let aa = dot(a, a) + 2.0 * alpha * dot(a, d) + alpha * alpha * dot(d, d);
        data + 0.5 * self.lambda * aa
    }

    fn curvature(&self, d: &[f64], o: &[f64], q: &[f64]) -> f64 {
        let c = self.rows;
        let t = self.data.len();
        ordered_sum(t, |i| {
            sample_curvature(
                self.kind,
                &self.data.targets,
                i,
                &o[i * c..(i + 1) * c],
                &q[i * c..(i + 1) * c],
            )
        }) / t as f64
            + self.lambda * dot(d, d)
    }
}

/// Gradient of the training objective with respect to the center core.
pub fn gradient_site(
    w: &Mps,
    site: usize,
    data: &TrainingData,
    kind: LossKind,
    lambda: f64,
    cache: &EnvironmentCache,
) -> Result<DenseTensor> {
    data.check(w, kind)?;
    cache.check(w, site, &data.batch)?;
    let core = w.core(site);
    let p = problem(w, site, data, kind, lambda, cache);
    let outs = p.outputs(core.data());
    DenseTensor::new(core.shape().to_vec(), p.gradient(core.data(), &outs))
}

fn problem<'a>(
    w: &Mps,
    site: usize,
    data: &'a TrainingData,
    kind: LossKind,
    lambda: f64,
    cache: &'a EnvironmentCache,
) -> SiteProblem<'a> {
    let dims = dims_of(w.core(site));
    let (left, right) = (cache.left(), cache.right());
    SiteProblem {
        left,
        right,
        dims,
        site,
        data,
        kind,
        lambda,
        rows: output_rows(left, right, dims),
    }
}

/// Outcome of one site update.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteUpdate {
    pub loss_before: f64,
    pub loss_after: f64,
    pub steps: usize,
    /// The line search failed and the remaining steps were skipped.
    pub stalled: bool,
}

/// Runs up to `cg_steps` nonlinear CG iterations on the center core.
pub fn optimize_site(
    w: &mut Mps,
    site: usize,
    data: &TrainingData,
    config: &TrainConfig,
    cache: &EnvironmentCache,
) -> Result<SiteUpdate> {
    data.check(w, config.loss_kind)?;
    cache.check(w, site, &data.batch)?;
    let p = problem(w, site, data, config.loss_kind, config.lambda, cache);
    let start = w.core(site).data().to_vec();
    let mut a = start.clone();
    let mut outs = p.outputs(&a);
    let loss_before = p.objective(&a, &outs);
    let mut f0 = loss_before;
    let mut g = p.gradient(&a, &outs);
    let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut stalled = false;
    let mut steps = 0;

    for _ in 0..config.cg_steps {
        let gg = dot(&g, &g);
        if gg == 0.0 || !gg.is_finite() {
            break;
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|x| -x).collect();
            slope = -gg;
        }
        let q = p.outputs(&d);
        let curv = p.curvature(&d, &outs, &q);
        let dd = dot(&d, &d);
        let mut alpha = if curv > 0.0 && curv.is_finite() {
            -slope / curv
        } else {
            dot(&a, &a).sqrt().max(1.0) / dd.sqrt()
        };
        // Predicted decrease below round-off: the core is already stationary.
        if -0.5 * slope * alpha <= 4.0 * f64::EPSILON * f0.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let trial = p.line(&a, &d, &outs, &q, alpha);
            if trial.is_finite() && trial <= f0 + config.armijo_c * alpha * slope {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(trial) = accepted else {
            stalled = true;
            break;
        };
        for (x, y) in a.iter_mut().zip(&d) {
            *x += alpha * y;
        }
        for (x, y) in outs.iter_mut().zip(&q) {
            *x += alpha * y;
        }
        f0 = trial;
        steps += 1;
        let g_new = p.gradient(&a, &outs);
        let beta = (dot(&g_new, &g_new) - dot(&g_new, &g)) / gg;
        let beta = if beta.is_finite() { beta.max(0.0) } else { 0.0 };
        for (x, y) in d.iter_mut().zip(&g_new) {
            *x = -y + beta * *x;
        }
        g = g_new;
    }

    let mut loss_after = loss_before;
    if steps > 0 {
        // Confirm the decrease without the accumulated output updates.
        let fresh = p.objective(&a, &p.outputs(&a));
        if fresh <= loss_before {
            loss_after = fresh;
            w.core_mut(site).data_mut().copy_from_slice(&a);
        } else {
            stalled = true;
            steps = 0;
        }
    }
    debug_assert_eq!(start.len(), a.len());
    Ok(SiteUpdate {
        loss_before,
        loss_after,
        steps,
        stalled,
    })
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub sweep: usize,
    pub site: usize,
}

/// Per-sweep history. Sweep 0 is the initial model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<SweepRecord>,
    pub best_validation_sweep: Option<usize>,
    /// The sweep whose model was returned.
    pub returned_sweep: usize,
    pub stalls: Vec<Stall>,
    pub updates: usize,
    /// Largest per-update change of the site objective (≤ 0 when monotone).
    pub max_update_increase: f64,
    pub monotonicity_violations: usize,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn final_record(&self) -> &SweepRecord {
        self.records.last().expect("trace has sweep 0")
    }

    pub fn returned_record(&self) -> &SweepRecord {
        &self.records[self.returned_sweep]
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sweep", "train_loss", "val_loss", "test_loss"])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.16e}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.sweep.to_string(),
                format!("{:.16e}", r.train_loss),
                opt(r.val_loss),
                opt(r.test_loss),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn optional_loss(w: &Mps, d: Option<&TrainingData>, kind: LossKind) -> Result<Option<f64>> {
    match d {
        Some(d) if !d.is_empty() => Ok(Some(data_loss(w, d, kind)?)),
        _ => Ok(None),
    }
}

/// Sweeps `w0` over the training data.
///
/// Returns the model with the lowest validation loss (sweep 0 included) when
/// checkpointing on validation and a non-empty validation set is given, and
/// the final model otherwise.
pub fn train(
    w0: &Mps,
    train: &TrainingData,
    val: Option<&TrainingData>,
    test: Option<&TrainingData>,
    config: &TrainConfig,
) -> Result<(Mps, TrainTrace)> {
    config.validate()?;
    let kind = config.loss_kind;
    train.check(w0, kind)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for d in [val, test].into_iter().flatten() {
        d.check(w0, kind)?;
    }
    let use_val =
        config.checkpoint == Checkpoint::BestValidation && val.is_some_and(|v| !v.is_empty());
    let n = w0.sites();
    let mut w = w0.canonicalize(0)?;
    let mut cache = EnvironmentCache::new(&w, &train.batch, 0)?;
    let mut trace = TrainTrace {
        max_update_increase: f64::NEG_INFINITY,
        ..Default::default()
    };

    let record = |w: &Mps, sweep: usize, seconds: f64, trace: &mut TrainTrace| -> Result<()> {
        trace.records.push(SweepRecord {
            sweep,
            train_loss: loss(w, train, kind, config.lambda)?,
            val_loss: optional_loss(w, val, kind)?,
            test_loss: optional_loss(w, test, kind)?,
            seconds,
        });
        Ok(())
    };
    record(&w, 0, 0.0, &mut trace)?;
    let mut best = w.clone();
    let mut best_val = trace.records[0].val_loss;
    if use_val {
        trace.best_validation_sweep = Some(0);
    }

    let visit = |w: &mut Mps,
                 cache: &EnvironmentCache,
                 site: usize,
                 sweep: usize,
                 trace: &mut TrainTrace|
     -> Result<()> {
        let u = optimize_site(w, site, train, config, cache)?;
        let delta = u.loss_after - u.loss_before;
        trace.updates += 1;
        trace.max_update_increase = trace.max_update_increase.max(delta);
        if delta > MONOTONE_TOL {
            trace.monotonicity_violations += 1;
        }
        if u.stalled {
            log::debug!("line search stalled at sweep {sweep}, site {site}");
            trace.stalls.push(Stall { sweep, site });
        }
        Ok(())
    };

    for sweep in 1..=config.sweeps {
        let clock = Instant::now();
        if n == 1 {
            visit(&mut w, &cache, 0, sweep, &mut trace)?;
        }
        for site in 0..n.saturating_sub(1) {
            visit(&mut w, &cache, site, sweep, &mut trace)?;
            cache.move_right(&mut w, &train.batch)?;
        }
        for site in (1..n).rev() {
            visit(&mut w, &cache, site, sweep, &mut trace)?;
            cache.move_left(&mut w, &train.batch)?;
        }
        record(&w, sweep, clock.elapsed().as_secs_f64(), &mut trace)?;
        let last = trace.records.len() - 1;
        if use_val {
            let v = trace.records[last].val_loss;
            if v < best_val {
                best_val = v;
                best = w.clone();
                trace.best_validation_sweep = Some(sweep);
            }
        }
        if let Some(tol) = config.early_stop {
            let gain = trace.records[last - 1].train_loss - trace.records[last].train_loss;
            if gain < tol {
                trace.stopped_early = sweep < config.sweeps;
                break;
            }
        }
    }
    if trace.updates == 0 {
        trace.max_update_increase = 0.0;
    }
    if use_val {
        trace.returned_sweep = trace.best_validation_sweep.expect("set at sweep 0");
        Ok((best, trace))
    } else {
        trace.returned_sweep = trace.records.len() - 1;
        Ok((w, trace))
    }
}
