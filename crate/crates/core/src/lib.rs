//! Dense image matching posed as Gaussian-process regression from feature
//! vectors to embedded spatial coordinates.
//!
//! The pipeline: dense descriptors for both images ([`features`]), a
//! coordinate embedding of the support grid ([`embedding`]), a regressor
//! from query features to embedded support coordinates ([`regress`], built
//! on [`kernel`]), and a decoder back to a dense warp with confidence
//! ([`decode`]). [`metrics`] and [`bench`] evaluate the result.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below name the common instantiations.

// `!(x > 0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod geometry;
pub mod linalg;
pub mod scalar;
pub mod embedding;
pub mod kernel;
pub mod regress;
pub mod features;
pub mod decode;
pub mod metrics;
pub mod pipeline;
pub mod bench;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type WarpField64 = geometry::WarpField<f64>;
pub type WarpField32 = geometry::WarpField<f32>;
pub type NormalizedGrid64 = geometry::NormalizedGrid<f64>;
pub type NormalizedGrid32 = geometry::NormalizedGrid<f32>;
pub type Homography64 = geometry::Homography<f64>;
pub type Homography32 = geometry::Homography<f32>;
pub type EmbeddingBasis64 = embedding::EmbeddingBasis<f64>;
pub type EmbeddingBasis32 = embedding::EmbeddingBasis<f32>;
pub type KernelSpec64 = kernel::KernelSpec<f64>;
pub type KernelSpec32 = kernel::KernelSpec<f32>;
pub type FeatureMap64 = features::FeatureMap<f64>;
pub type FeatureMap32 = features::FeatureMap<f32>;
pub type Image64 = features::Image<f64>;
pub type Image32 = features::Image<f32>;
pub type Mat64 = linalg::Mat<f64>;
pub type Mat32 = linalg::Mat<f32>;
