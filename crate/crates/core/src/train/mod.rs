//! Losses, gradients and the toy-scale training loop.

mod backward;
mod gradcheck;
mod loss;
mod swap;
mod toy;

pub use backward::{backward, ce_objective, forward_traced, mwer_objective, ForwardTrace};
pub use gradcheck::{
    grad_check, rescorer_grad_check, CheckedLoss, GradCheckOptions, GradCheckReport, Parameters,
    TensorCheck,
};
pub use loss::{ce_loss, mwer_loss, CeOutput, MwerBatch, MwerOutput};
pub use swap::{token_swap, SwapPolicy};
pub use toy::{evaluate, train_toy, Stage, ToyEval, ToyTrainConfig, ToyTrainOutcome, TraceRow};
