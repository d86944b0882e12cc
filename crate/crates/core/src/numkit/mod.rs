//! Dense rank-4 tensors, small-matrix LU, and a reverse-mode tape.

pub mod kernels;
pub mod linalg;
mod tape;
mod tensor;

pub use linalg::{LogDetSolve, Lu, Matrix, SquareMatrix};
pub use tape::{ElemOp, Gradients, Operand, Tape, Var};
pub use tensor::{Shape, Tensor};
