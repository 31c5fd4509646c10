//! Slice-level kernels shared by the tape and the standalone tensor ops.

use crate::error::{Error, Result};

use super::BLOCK;

/// Entries at or below this value count as blocked when validating masks.
const BLOCKED_BELOW: f64 = BLOCK / 2.0;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = op(a) * op(b) + beta * c`, where `op` optionally transposes.
///
/// `a` is `m x k` after `op`, `b` is `k x n` after `op`, both row-major as
/// stored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent the strides
    // address, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn mask_row(mask: Option<&[f64]>, row: usize, cols: usize) -> Option<&[f64]> {
    mask.map(|m| {
        if m.len() == cols {
            m
        } else {
            &m[row * cols..(row + 1) * cols]
        }
    })
}

pub fn check_mask(mask: &[f64], rows: usize, cols: usize) -> Result<()> {
    if mask.len() != cols && mask.len() != rows * cols {
        return Err(Error::Shape {
            op: "mask",
            lhs: vec![rows, cols],
            rhs: vec![mask.len()],
        });
    }
    for r in 0..rows {
        let m = mask_row(Some(mask), r, cols).unwrap();
        if m.iter().all(|&v| v <= BLOCKED_BELOW) {
            return Err(Error::DegenerateMask { row: r });
        }
    }
    Ok(())
}

/// Row-wise softmax of `x + mask`. The mask is either a full `rows x cols`
/// matrix or a single row broadcast over every row.
pub fn softmax_rows(x: &[f64], mask: Option<&[f64]>, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mr = mask_row(mask, r, cols);
        let o = &mut out[r * cols..(r + 1) * cols];
        for (j, v) in o.iter_mut().enumerate() {
            *v = xr[j] + mr.map_or(0.0, |m| m[j]);
        }
        let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in o.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], mask: Option<&[f64]>, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mr = mask_row(mask, r, cols);
        let o = &mut out[r * cols..(r + 1) * cols];
        for (j, v) in o.iter_mut().enumerate() {
            *v = xr[j] + mr.map_or(0.0, |m| m[j]);
        }
        let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + o.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in o.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Layer normalization forward; returns `(y, xhat, rstd)`.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * cols];
    let mut xhat = vec![0.0; rows * cols];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let h = (xr[j] - mean) * rs;
            xhat[r * cols + j] = h;
            y[r * cols + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 1.0);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_validation() {
        assert!(check_mask(&[0.0, BLOCK], 2, 2).is_ok());
        assert!(matches!(
            check_mask(&[0.0, 0.0, BLOCK, BLOCK], 2, 2),
            Err(Error::DegenerateMask { row: 1 })
        ));
        assert!(check_mask(&[0.0; 3], 2, 2).is_err());
    }
}
