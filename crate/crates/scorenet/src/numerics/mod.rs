//! Tensor container, math kernels, RNG streams, reverse-mode autodiff, and
//! checkpoint serialization.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::grad_check;
pub use rng::RngStream;
pub use tape::{BackwardFn, GradStore, NodeId, Tape, Values};
pub use tensor::Tensor;
