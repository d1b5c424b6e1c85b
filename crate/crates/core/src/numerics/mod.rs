//! Dense tensors, a define-by-run tape, parameters and the SGD optimizer.

mod gradcheck;
mod graph;
mod optim;
mod param;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_params, grad_check_params_report, grad_check_with, relative_error, GradCheckReport, FD_STEP,
    RESOLUTION_ULPS,
};
pub use graph::{softmax_rows, Gradients, Graph, Mode, Var};
pub use optim::sgd_step;
pub use param::{ParamId, ParamSet, Parameter};
pub use tensor::Tensor;

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
