//! Adjacent-slice absolute difference with a zero-filled first slice.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `(outer, extent, inner)` decomposition around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::config(format!("axis {axis} out of range for shape {shape:?}")));
    }
    if shape[axis] < 2 {
        return Err(Error::config(format!(
            "slice difference needs extent >= 2 along axis {axis}, shape {shape:?}"
        )));
    }
    Ok(())
}

/// `out[s] = |x[s] - x[s-1]|` for `s >= 1`, `out[0] = 0`.
pub fn abs_diff_forward<T: Scalar>(shape: &[usize], x: &[T], axis: usize) -> Result<Vec<T>> {
    check_axis(shape, axis)?;
    let (outer, n, inner) = split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for s in 1..n {
            let cur = base + s * inner;
            let prev = cur - inner;
            for j in 0..inner {
                out[cur + j] = (x[cur + j] - x[prev + j]).abs();
            }
        }
    }
    Ok(out)
}

/// Subgradient of `|.|` at zero is taken as zero.
pub fn abs_diff_backward<T: Scalar>(shape: &[usize], x: &[T], axis: usize, grad_out: &[T]) -> Vec<T> {
    let (outer, n, inner) = split(shape, axis);
    let mut gx = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for s in 1..n {
            let cur = base + s * inner;
            let prev = cur - inner;
            for j in 0..inner {
                let d = x[cur + j] - x[prev + j];
                let sign = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                let g = sign * grad_out[cur + j];
                gx[cur + j] = gx[cur + j] + g;
                gx[prev + j] = gx[prev + j] - g;
            }
        }
    }
    gx
}
