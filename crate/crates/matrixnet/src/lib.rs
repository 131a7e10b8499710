//! A desk-scale, fully testable corner-keypoint object detector built on a
//! matrix-of-layers backbone.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff
//! engine ([`graph`]), a small strided-conv pyramid expanded into a matrix
//! of rectangular-receptive-field layers ([`backbone`]), width/height range
//! assignment with relaxation ([`assign`]), shared corner/center heads with
//! focal and smooth-L1 losses ([`heads`]), a center-consistency decoder with
//! soft-NMS ([`decoder`]), and a training/evaluation harness with synthetic
//! data, COCO-style ingestion, and bit-exact checkpoints.

pub mod assign;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ConvSpec, Graph, NodeId};
pub use tensor::Tensor;
