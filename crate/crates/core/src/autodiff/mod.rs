//! Minimal dense reverse-mode autodiff: tensors, a define-by-run tape and
//! the two optimizers the training loop needs.

mod optim;
mod tape;
mod tensor;

pub use optim::{cosine_lr, step_adamw, step_sgd, AdamState, AdamWConfig, ParameterGroup, StepStatus};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine_similarity, l2_norm, l2_normalize, log_softmax_nll, Tensor, NORM_EPS};
