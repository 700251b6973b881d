//! Forward and hand-derived backward passes for the model primitives.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngStream;

/// y = x W + b, row-wise. x: B x in, W: in x out, b: 1 x out.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    y.add_row(b)?;
    Ok(y)
}

pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Matrix,
}

/// Backward of `linear_forward` given upstream dy.
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    Ok(LinearGrads {
        dx: dy.matmul_nt(w)?,
        dw: x.matmul_tn(dy)?,
        db: dy.col_sum(),
    })
}

/// Elementwise max(0, x). Subgradient at exactly 0 is 0.
pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, v) in dx.data.iter_mut().zip(&x.data) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Dropout mask holding the scale factor (0 or 1/(1-rate)) per entry.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub scale: Matrix,
}

impl DropoutMask {
    /// An identity mask (no dropout), useful for eval paths.
    pub fn identity(rows: usize, cols: usize) -> Self {
        let mut scale = Matrix::zeros(rows, cols);
        scale.fill(1.0);
        DropoutMask { scale }
    }

    pub fn draw(rows: usize, cols: usize, rate: f64, rng: &mut RngStream) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArg(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mut scale = Matrix::zeros(rows, cols);
        for v in &mut scale.data {
            *v = if rng.next_f64() < rate { 0.0 } else { keep_scale };
        }
        Ok(DropoutMask { scale })
    }
}

/// Inverted dropout. With `training=false` (or rate 0) this is the identity.
/// Returns the mask so backward can reuse it.
pub fn dropout_forward(
    x: &Matrix,
    rate: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Matrix, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArg(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity(x.rows, x.cols)));
    }
    let mask = DropoutMask::draw(x.rows, x.cols, rate, rng)?;
    Ok((apply_mask(x, &mask), mask))
}

pub fn apply_mask(x: &Matrix, mask: &DropoutMask) -> Matrix {
    let mut y = x.clone();
    for (v, s) in y.data.iter_mut().zip(&mask.scale.data) {
        *v *= s;
    }
    y
}

pub fn dropout_backward(dy: &Matrix, mask: &DropoutMask) -> Matrix {
    apply_mask(dy, mask)
}

/// Elementwise max over adjacent row pairs: rows (2n, 2n+1) -> row n.
/// An odd trailing row is dropped. Returns argmax row indices for backward.
pub fn maxpool_adjacent(z: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    if z.rows < 2 {
        return Err(Error::InvalidArg(format!(
            "maxpool_adjacent needs at least 2 rows, got {}",
            z.rows
        )));
    }
    let n_out = z.rows / 2;
    let mut out = Matrix::zeros(n_out, z.cols);
    let mut argmax = vec![0usize; n_out * z.cols];
    for n in 0..n_out {
        for c in 0..z.cols {
            let a = z.at(2 * n, c);
            let b = z.at(2 * n + 1, c);
            // ties route the gradient to the earlier row
            if b > a {
                *out.at_mut(n, c) = b;
                argmax[n * z.cols + c] = 2 * n + 1;
            } else {
                *out.at_mut(n, c) = a;
                argmax[n * z.cols + c] = 2 * n;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_adjacent_backward(dy: &Matrix, argmax: &[usize], rows_in: usize) -> Matrix {
    let mut dx = Matrix::zeros(rows_in, dy.cols);
    for n in 0..dy.rows {
        for c in 0..dy.cols {
            let src = argmax[n * dy.cols + c];
            *dx.at_mut(src, c) += dy.at(n, c);
        }
    }
    dx
}
