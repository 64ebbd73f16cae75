//! Reverse-mode automatic differentiation substrate: a tape [`Graph`] of
//! strict-shape tensor ops generic over [`Real`] (f32 for training, f64 for
//! gradient checking), plus a central-finite-difference checker.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod real;

pub use gradcheck::{check_gradients, GradCheckReport, LeafSpec};
pub use graph::{Graph, Tensor, LAYERNORM_EPS, NORM_EPS};
pub use params::{Binding, Param, ParamId, ParamStore};
pub use real::Real;
