//! Dense-network compute core: tensors, taped MLPs, optimizers and the
//! checkpoint container shared by every model in the crate.

mod checkpoint;
mod mlp;
mod optim;
mod tensor;

pub use checkpoint::{load_mlp, save_mlp, Checkpoint};
pub use mlp::{Activation, DenseLayer, LayerGrad, LayerSpec, Mlp, MlpGrads, Parameterized, Tape};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::Tensor;
