//! Dense-tensor arithmetic with reverse-mode automatic differentiation, the
//! flat parameter store, the checkpoint wire format, and a finite-difference
//! gradient checker. Everything above is built on this module.

pub mod checkpoint;
pub mod gradcheck;
pub mod store;
pub mod tape;
pub mod tensor;

pub use checkpoint::{CkptEntry, TensorData};
pub use gradcheck::{finite_diff_check, FiniteDiffReport};
pub use store::ParameterStore;
pub use tape::{BufId, Tape};
pub use tensor::{Dtype, Real, Tensor};
