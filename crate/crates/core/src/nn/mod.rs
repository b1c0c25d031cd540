//! Just enough of a neural network toolkit for the next-token model:
//! dense matrices, LSTM cells, the bidirectional stack, weighted
//! cross-entropy, hand-written backpropagation through time and lazy Adam.

pub mod adam;
pub mod checkpoint;
pub mod lstm;
pub mod model;
pub mod tensor;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use lstm::LstmCellParams;
pub use model::{loss, softmax, Dense, ForwardCache, ModelConfig, ModelGrads, ModelParams};
pub use tensor::Tensor2;
