//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{finite_diff_check, relative_error, Coordinate, CoordinateCheck, GradCheckOptions, GradCheckReport, Stencil};
pub use graph::{Gradients, Graph, NodeId};
