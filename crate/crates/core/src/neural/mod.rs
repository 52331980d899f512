//! A small dense tensor engine: attention layers with hand-written backward
//! passes and the reversible residual stack.

mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod reversible;
mod tensor;

pub use checkpoint::{
    blob_path, load_checkpoint, load_policy, save_checkpoint, Manifest, TensorEntry,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{finite_difference_check, finite_difference_check_with_step, FdReport, FD_STEP};
pub use layers::{
    attn_branch_backward, attn_branch_forward, ff_backward, ff_branch_backward, ff_branch_forward,
    ff_forward, layer_norm_backward, layer_norm_forward, mha_backward, mha_forward, AttnShape,
    EncoderLayerIds, MhaCache, LAYER_NORM_EPS,
};
pub(crate) use layers::add_row_bias;
pub use params::{GradBuffer, ParamId, ParamStore, Params};
pub use reversible::{
    rev_block_forward, rev_block_inverse, rev_stack_backward, rev_stack_forward,
    rev_stack_inverse, stored_stack_backward, ActivationTracker, StackGradients,
};
pub(crate) use tensor::debug_finite;
pub use tensor::{axpy, dot, gemm, matmul, MatMut, MatRef, Real, Tensor};
