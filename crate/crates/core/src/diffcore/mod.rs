//! Dense tensors and small MLPs with reverse-mode gradients.
//!
//! Gradients are available with respect to both the parameters and the
//! network input. The input gradient is what lets the augmentation step
//! follow `d/ds Q(s, pi(s))`.

mod adam;
mod checkpoint;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub(crate) use adam::ScalarAdam;
pub use checkpoint::{load_params, read_params, save_params, write_params, MAGIC};
pub use mlp::{
    finite_diff_input_grad, mlp_backward, mlp_forward, mlp_input_grad, Activation, ForwardCache,
    Gradients, Layer, MlpParams,
};
pub use tensor::Tensor;
