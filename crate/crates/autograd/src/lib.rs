//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every value on the tape is a row-major `f64` matrix. Vectors are `1 × n`
//! rows, scalars are `1 × 1`. Higher-rank tensors are stored flat and
//! rearranged with [`Graph::gather`], which covers patching, broadcasting
//! and masking with a single differentiable primitive.
//!
//! ```
//! use stmask_autograd::{Graph, Matrix};
//!
//! let mut g = Graph::new();
//! let x = g.param(Matrix::from_vec(1, 2, vec![3.0, -1.0]));
//! let y = g.square(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
//! ```

mod graph;
mod matrix;

pub use graph::{Gradients, Graph, Var};
pub use matrix::Matrix;
