//! Dense tensors, a reverse-mode tape, and a central-difference checker.

mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{
    finite_difference_check, relative_error, Coverage, GradCheckReport, ParamCheck,
    RELATIVE_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamStore, ParamVars};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
