//! Separable trilinear upsampling with half-pixel centres and edge clamping.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Per-output-index interpolation taps `(lo, hi, frac)` along one axis.
fn taps(n_in: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * scale)
        .map(|i| {
            let src = ((i as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Interpolates along the middle axis of an `[outer, n_in, inner]` buffer.
fn interp_axis<T: Scalar>(x: &[T], outer: usize, n_in: usize, inner: usize, scale: usize) -> Vec<T> {
    let table = taps(n_in, scale);
    let n_out = n_in * scale;
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &x[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for (i, &(lo, hi, frac)) in table.iter().enumerate() {
            let f = T::from_f64(frac);
            let a = &src[lo * inner..(lo + 1) * inner];
            let b = &src[hi * inner..(hi + 1) * inner];
            for ((d, &va), &vb) in dst[i * inner..(i + 1) * inner].iter_mut().zip(a).zip(b) {
                // `a + f*(b-a)` keeps constant inputs exactly constant.
                *d = va + f * (vb - va);
            }
        }
    }
    out
}

/// Adjoint of [`interp_axis`].
fn interp_axis_adjoint<T: Scalar>(
    g: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    scale: usize,
) -> Vec<T> {
    let table = taps(n_in, scale);
    let n_out = n_in * scale;
    let mut out = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let src = &g[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut out[o * n_in * inner..(o + 1) * n_in * inner];
        for (i, &(lo, hi, frac)) in table.iter().enumerate() {
            let f = T::from_f64(frac);
            let w_lo = T::one() - f;
            let gi = &src[i * inner..(i + 1) * inner];
            for (j, &v) in gi.iter().enumerate() {
                dst[lo * inner + j] = dst[lo * inner + j] + w_lo * v;
                dst[hi * inner + j] = dst[hi * inner + j] + f * v;
            }
        }
    }
    out
}

pub fn check_scale(shape: &[usize], scale: [usize; 3]) -> Result<Vec<usize>> {
    if shape.len() < 3 {
        return Err(Error::config(format!(
            "upsample needs a tensor with trailing [S, H, W], got {shape:?}"
        )));
    }
    if scale.iter().any(|&s| s < 1) {
        return Err(Error::config(format!("upsample scale must be >= 1, got {scale:?}")));
    }
    let mut out = shape.to_vec();
    let nd = shape.len();
    for a in 0..3 {
        out[nd - 3 + a] *= scale[a];
    }
    Ok(out)
}

/// Shapes `[outer, n, inner]` of the three trailing axes visited W, H, S.
fn axis_views(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let nd = shape.len();
    let d = nd - 3 + axis;
    let outer = shape[..d].iter().product();
    let inner = shape[d + 1..].iter().product();
    (outer, shape[d], inner)
}

pub fn upsample_forward<T: Scalar>(shape: &[usize], x: &[T], scale: [usize; 3]) -> Result<(Vec<usize>, Vec<T>)> {
    let out_shape = check_scale(shape, scale)?;
    let mut cur_shape = shape.to_vec();
    let mut cur = x.to_vec();
    let nd = shape.len();
    for axis in (0..3).rev() {
        if scale[axis] == 1 {
            continue;
        }
        let (outer, n, inner) = axis_views(&cur_shape, axis);
        cur = interp_axis(&cur, outer, n, inner, scale[axis]);
        cur_shape[nd - 3 + axis] *= scale[axis];
    }
    Ok((out_shape, cur))
}

pub fn upsample_backward<T: Scalar>(in_shape: &[usize], grad_out: &[T], scale: [usize; 3]) -> Vec<T> {
    // Forward visited W, H, S; the adjoint visits S, H, W.
    let nd = in_shape.len();
    let mut cur_shape = check_scale(in_shape, scale).expect("validated in forward");
    let mut cur = grad_out.to_vec();
    for axis in 0..3 {
        if scale[axis] == 1 {
            continue;
        }
        cur_shape[nd - 3 + axis] /= scale[axis];
        let (outer, n, inner) = axis_views(&cur_shape, axis);
        cur = interp_axis_adjoint(&cur, outer, n, inner, scale[axis]);
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_to_four_matches_coordinate_formula() {
        // (i + 0.5)/2 - 0.5 -> [-0.25, 0.25, 0.75, 1.25], clamped to [0, 1].
        let (shape, y) = upsample_forward(&[1, 1, 2], &[0.0f64, 1.0], [1, 1, 2]).unwrap();
        assert_eq!(shape, vec![1, 1, 4]);
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn unit_scale_is_identity() {
        let x: Vec<f32> = (0..24).map(|v| v as f32 * 0.3).collect();
        let (shape, y) = upsample_forward(&[2, 3, 4], &x, [1, 1, 1]).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_zero_scale() {
        assert!(upsample_forward(&[1, 2, 2], &[0.0f32; 4], [1, 0, 1]).is_err());
    }

    #[test]
    fn adjoint_identity() {
        // <U x, g> == <x, U^T g>
        let shape = [1, 2, 3, 2, 3];
        let x: Vec<f64> = (0..36).map(|v| ((v * 7 % 11) as f64).sin()).collect();
        let scale = [2, 3, 2];
        let (os, y) = upsample_forward(&shape, &x, scale).unwrap();
        let g: Vec<f64> = (0..os.iter().product::<usize>()).map(|v| (v as f64 * 0.37).cos()).collect();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let gt = upsample_backward(&shape, &g, scale);
        let rhs: f64 = x.iter().zip(&gt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
