//! Differentiable computation substrate: dense tensors, a reverse-mode tape,
//! and a finite-difference gradient checker.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Graph, ParamGrads, Var};
pub use tensor::{ModelParams, Tensor};

use crate::error::{Error, Result};

/// Additive mask value for blocked attention positions.
pub const BLOCK: f64 = -1e9;

/// Matrix product of two rank-1/rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims();
    let (k2, n) = b.matrix_dims();
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

/// Softmax over the last axis of `logits + mask`.
///
/// `mask` holds 0 (attend) or [`BLOCK`] and either matches `logits` or is a
/// single row broadcast across every row. A row with every position blocked
/// is rejected.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.matrix_dims();
    if mask.matrix_dims().1 != cols {
        return Err(Error::Shape {
            op: "masked_softmax",
            lhs: logits.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    kernels::check_mask(mask.data(), rows, cols)?;
    let out = kernels::softmax_rows(logits.data(), Some(mask.data()), rows, cols);
    Tensor::new(logits.shape().to_vec(), out)
}
