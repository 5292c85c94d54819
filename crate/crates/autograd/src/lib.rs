//! Dense f32 tensors with tape-based reverse-mode autodiff.
//!
//! Everything runs single-threaded with fixed accumulation order, so a
//! given seed reproduces training bit for bit on the same machine.  The
//! raw numeric kernels are public: inference paths (e.g. cached
//! autoregressive decoding) call them directly and therefore agree bitwise
//! with graph forward passes over the same values.

pub mod finite_diff;
pub mod graph;
pub mod kernels;
mod nn;
mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore};
pub use rng::{mix_seed, Rng};
pub use tensor::{Result, Tensor, TensorError};
