//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed during a forward pass. Calling
//! [`Tape::backward`] on a scalar output replays the record in reverse and
//! accumulates gradients into tape leaves and into the trainable tensors held
//! by a [`ParamStore`].
//!
//! ```
//! use hme_autodiff::{ParamStore, Tape, Tensor};
//!
//! let mut params = ParamStore::new();
//! let mut tape = Tape::new(0);
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
//! let loss = tape.sum(x).unwrap();
//! tape.backward(loss, &mut params).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

pub mod check;
mod error;
mod kernels;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
