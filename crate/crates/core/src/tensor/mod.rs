//! Dense tensors with a reverse-mode gradient tape.
//!
//! [`Graph`] records ops eagerly; [`ParamStore`] owns trainable tensors and
//! binds them to a graph per pass; [`checkpoint`] persists stores in the
//! `QI2-CKPT` format.

pub mod checkpoint;
mod dense;
pub mod gradcheck;
mod graph;
mod optim;
mod params;

pub use dense::Tensor;
pub use gradcheck::{check_op_suite, grad_check, grad_check_owner, grad_check_params, op_suite, rel_err, OpProbe, ParamCheck};
pub use graph::{Gradients, Graph, Precision, Var, NORM_EPS};
#[allow(unused_imports)]
pub(crate) use graph::gemm;
pub use optim::{clip_grad_norm, grad_norm, Adam};
pub use params::{ParamId, ParamStore};
