//! Minimal differentiable array engine: tensors, an eager reverse-mode
//! graph, named parameter storage, and finite-difference verification.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_corrupted, relative_error, GradCheckReport,
};
pub use graph::{Axis, GradientMap, Graph, Padding, ValueId};
pub use params::{capture_gradients, write_atomic, Checkpoint, Param, ParamBinding, ParamStore};
pub use tensor::{strides, Dtype, Real, Tensor};
