//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar walks the tape once in reverse and returns
//! the gradient of every leaf.
//!
//! ```
//! use robustdistill_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let loss = x.mul(x).unwrap().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;
mod error;
mod grad;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use ops::softmax_t;
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
