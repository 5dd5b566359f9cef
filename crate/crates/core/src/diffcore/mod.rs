//! Minimal differentiable substrate.
//!
//! Gradients are hand-derived per layer over a fixed op set; there is no
//! tape. Layer forward functions are pure, and each backward takes the
//! forward inputs again instead of a cached context.

mod gradcheck;
mod layers;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use layers::{
    cross_entropy_with_logits, dot, global_avg_pool, global_avg_pool_backward, grl_backward,
    grl_forward, log_softmax, relu, relu_backward, softmax, Conv2d, Dense,
};
pub use tensor::{ParamSet, Tensor};
