//! Dense-tensor numerics for desk-scale training: a recorded-tape
//! reverse-mode differentiator, the convolutional layer set, losses and Adam.
//!
//! All values are `f64`. Tensors put the channel axis last.

pub mod error;
pub mod functional;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{NumError, Result};
pub use functional::{cross_entropy, mse, softmax, Target};
pub use gradcheck::{grad_check, GradCheck, Parameterized};
pub use graph::{BatchStats, Gradients, Graph, ParamKey, Var};
pub use layers::{layer_forward, LayerSpec, Mode, Stack};
pub use optim::{warmup_lr, AdamConfig, AdamState};
pub use param::{Param, ParamSet};
pub use tensor::{argmax, Tensor};
