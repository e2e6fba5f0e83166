//! Dense tensors with reverse-mode differentiation over a recorded graph,
//! seeded initialization and finite-difference gradient verification.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_sampled, relative_error, GradCheckReport, ParamCheck, FD_STEP};
pub use graph::{ctc_min_frames, Feeds, Graph, NodeId, LAYER_NORM_EPS};
pub(crate) use graph::{ctc_forward_backward, log_softmax_rows};
pub use kernels::conv_out_len;
pub use rng::Rng;
pub use tensor::Tensor;

/// Named parameter tensors in registration order.
pub type ParamMap = indexmap::IndexMap<String, Tensor>;

#[doc(hidden)]
pub mod testing;

#[cfg(test)]
mod tests;
