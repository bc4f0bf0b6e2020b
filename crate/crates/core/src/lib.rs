//! Depth-aware hyper-involution and a two-stream single-stage RGB-D detector.
//!
//! The crate contains a small reverse-mode autodiff engine ([`autograd`]),
//! the depth-similarity weighting functions ([`depth`]), the sliding-window
//! operators and their filter-generating hyper-network ([`operators`]), the
//! trainable RGB/depth [`fusion`] stage, the full [`detector`] with its
//! [`loss`], VOC-style [`metrics`], an exact parameter/FLOP [`profiler`],
//! and a procedural RGB-D dataset generator ([`data`]).

pub mod autograd;
pub mod boxes;
pub mod data;
pub mod depth;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod operators;
pub mod optim;
pub mod params;
pub mod profiler;
pub mod tensor;
pub mod train;
pub mod weights_io;

pub use autograd::{BnMode, Graph, Padding, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
