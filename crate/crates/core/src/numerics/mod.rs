//! Dense tensors, keyed random streams, Adamax and training schedules.

pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use optim::{adamax_step, Adamax, OptimizerState};
pub use rng::{Purpose, RngStream};
pub use schedule::{cosine_lr, kl_anneal, temp_anneal};
pub use tensor::{gemm, matmul, Tensor};
