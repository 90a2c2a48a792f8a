//! Dense `f64` tensors, a reverse-mode tape, and the optimizer pieces the
//! model is trained with.

pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{clip_gradients, Adam, AdamConfig, AdamState};
pub use params::{GradBuf, ParamGrads, ParamId, ParamKind, ParamStore};
pub use tape::{log_sum_exp, sigmoid, softmax, Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
