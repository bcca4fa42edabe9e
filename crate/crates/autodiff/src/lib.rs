//! Reverse-mode automatic differentiation on dense row-major matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! returns gradients for the leaves that asked for them.
//!
//! ```
//! use cfgcd_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::row_vector(&[1.0, 2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use tape::{Gradients, Precision, Tape, Var};
pub use tensor::Tensor;
