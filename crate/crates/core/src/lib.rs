//! Calibration-free multi-view, temporal 2D-to-3D human pose lifting.
//!
//! The pipeline embeds per-frame 2D detections with confidence attentive
//! aggregation ([`features`]), fuses views with relative attention and a
//! random block mask ([`mft`]), and regresses the middle frame's 3D pose with
//! a temporal transformer encoder ([`tft`]). Everything runs on a small
//! reverse-mode autodiff engine ([`graph`]) that is generic over the scalar
//! type; training uses `f32` and gradient checks use `f64`.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod mft;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pose;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod tft;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
