//! Reverse-mode differentiation over small dense tensors, plus the layers and
//! optimizers the propensity and intensity networks are built from.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_all_ops, max_gradient_error, relative_error, weighted_sum, FD_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use layers::{Conv2d, Dense, EncoderBlock, LayerNorm, MultiHeadAttention, LAYER_NORM_EPS};
pub use optim::{make_optimizer, Adam, Optimizer, OptimizerKind, Sgd};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
