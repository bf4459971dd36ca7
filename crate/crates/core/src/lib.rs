//! Matrix product state (tensor train) models for regression and
//! classification, with the tooling needed to study how the bond dimension
//! acts as a regularizer.
//!
//! - [`tensor`]: dense tensors, contraction, truncated SVD, LU solves.
//! - [`feature_map`]: local feature maps and product feature tensors.
//! - [`mps`]: the MPS weight object, canonical forms, compression.
//! - [`datagen`]: synthetic data whose labels an MPS represents exactly.
//! - [`exact`]: closed-form ridge solution followed by SVD compression.
//! - [`dmrg`]: single-site sweeping with nonlinear conjugate gradient.
//! - [`classifier`]: labeled MPS, cross-entropy, IDX image ingestion.
//! - [`experiments`]: replicated scans, aggregation, CSV and SVG output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the tensor index notation.
#![allow(clippy::needless_range_loop)]

pub mod classifier;
pub mod datagen;
pub mod dmrg;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod feature_map;
pub mod mps;
pub mod tensor;

pub use error::{Error, Result};
pub use feature_map::{FeatureBatch, FeatureMap, FeaturizedSample, MapKind};
pub use mps::{Gauge, LabelSite, Mps};
pub use tensor::DenseTensor;
