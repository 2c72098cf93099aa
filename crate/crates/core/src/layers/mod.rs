//! Network building blocks.
//!
//! Each block comes in two forms: a tape-level function taking [`Var`]s, used
//! inside training graphs, and a plain parameter struct with an eager `apply`
//! used for inference and for checking against independent oracles.
//!
//! [`Var`]: crate::tensor::Var

mod conv;
mod head;
mod init;
mod norm;
mod params;

pub use conv::{
    build_partial_plan, conv2d_zero_pad, partial_conv2d, ConvKind, ConvLayer, ConvParams,
    PartialConvPlan,
};
pub use head::{
    conv1x1_head, convert_head, dense, global_avg_pool, Conv1x1GapHead, DenseLayer, DenseParams,
    GapFcHead, HeadForm,
};
pub use init::he_normal;
pub use norm::{batch_norm, BNParams, BatchNormLayer, BN_EPS, BN_MOMENTUM};
pub use params::{apply_updates, check_param_grads, Ctx, Gradients, ParamId, ParamKind, ParamStore};

use crate::error::Result;
use crate::tensor::{Tape, Var};

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.relu(x)
}

/// Unpadded max pooling; border cells are not rescaled.
pub fn max_pool2d(tape: &mut Tape, x: Var, kernel: usize, stride: usize) -> Result<Var> {
    tape.max_pool2d(x, kernel, stride)
}
