//! Dense f64 numeric kernel: a row-major matrix type, affine / LSTM / ReLU
//! layers with hand-written backward passes, the losses used by the training
//! code, Adam, and a flat binary checkpoint format. Everything is
//! single-threaded and deterministic given fixed inputs.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod optim;

pub use error::{KernelError, Result};
pub use layers::{sigmoid, xavier_uniform, Affine, LstmCell, ParamTensor, Relu};
pub use loss::{expectile_loss, logsumexp_row, mse, softmax, softmax_cross_entropy};
pub use matrix::Matrix;
pub use optim::{clip_global_norm, Adam};
