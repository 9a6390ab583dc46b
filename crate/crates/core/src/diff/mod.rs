//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_against, relative_error, GradCheckReport, ParamCheck};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerKind, OptimizerSpec};
pub use params::{Bindings, ParamEntry, ParamSnapshot, ParamStore};
pub use tensor::Tensor;
