//! Tensor, tape autodiff, the conv + GRU encoder-decoder, Adam and checkpoints.

mod checkpoint;
mod graph;
mod kernels;
mod model;
pub mod ops;
mod optim;
mod tensor;

pub use checkpoint::{checkpoint_dtype, Checkpoint};
pub use graph::{softmax_rows, BatchStats, Graph, Var, PROB_FLOOR};
pub use model::{
    batch_input, batch_labels, count_params, DecoderInit, Forward, Mode, ModelConfig, ModelParams,
    ScoreSequence,
};
pub use optim::{lr_schedule, Adam, HyperParams};
pub use tensor::Tensor;
