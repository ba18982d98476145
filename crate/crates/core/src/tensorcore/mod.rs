//! Dense matrices, a reverse-mode tape over a fixed op set, Adam, and the
//! warmup/cosine learning-rate schedule.

mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{softmax_rows, Graph, Var};
pub use optim::{Adam, LrSchedule};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{Scalar, View};
pub use tensor::Tensor;
