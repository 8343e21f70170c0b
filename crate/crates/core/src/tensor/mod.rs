//! A small reverse-mode automatic differentiation engine over `ndarray`
//! dynamic-dimension f64 arrays.
//!
//! The engine is define-by-run: model code appends nodes to a [`Graph`]
//! during the forward pass, then [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients. Everything is f64 so analytic
//! gradients can be validated against central finite differences at tight
//! tolerances (see [`gradcheck`]).
//!
//! The op set is deliberately small: elementwise arithmetic with
//! broadcasting, GEMM-backed matmuls and convolutions (longitude-periodic,
//! latitude-zero padding), data movement (reshape/permute/slice/concat/
//! roll/pad), window partition/merge for shifted-window attention, softmax,
//! layer norm, GELU, and reductions.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod params;

pub use conv::{bilinear_upsample, Conv2dCfg};
pub use graph::{Graph, NodeId};
pub use params::{Binding, ParamStore};
