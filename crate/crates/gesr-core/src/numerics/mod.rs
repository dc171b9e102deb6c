//! Dense f64 linear algebra and a small reverse-mode autodiff tape.
//!
//! Everything downstream (attention, towers, gating, serving) is expressed
//! through [`graph::Graph`] ops so that one backward implementation covers
//! the whole model and the serving path reuses the identical forward code.

pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod mlp;

pub use gradcheck::grad_check;
pub use graph::{sigmoid, Graph, ParamId, ParamStore, ParamTensor, Var};
pub use matrix::{BoolMatrix, DenseMatrix};
pub use mlp::{Activation, Mlp, MlpSpec};
