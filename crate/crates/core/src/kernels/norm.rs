//! Group normalization and weight standardization.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Saved statistics for the group-norm backward pass.
#[derive(Debug, Clone)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn check_groups(shape: &[usize], groups: usize) -> Result<()> {
    if shape.len() < 2 {
        return Err(Error::config(format!("group_norm needs [N, C, ...], got {shape:?}")));
    }
    let c = shape[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "group count {groups} does not divide {c} channels"
        )));
    }
    Ok(())
}

/// Two-pass mean and population variance of a slice.
fn moments<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var)
}

pub fn group_norm_forward<T: Scalar>(
    shape: &[usize],
    x: &[T],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Vec<T>, GroupStats<T>)> {
    check_groups(shape, groups)?;
    let (n, c) = (shape[0], shape[1]);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::config(format!(
            "group_norm affine parameters must have {c} entries, got {} and {}",
            gamma.len(),
            beta.len()
        )));
    }
    let spatial: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let group_len = cpg * spatial;
    let mut out = vec![T::zero(); x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    for (gi, (xg, yg)) in x.chunks(group_len).zip(out.chunks_mut(group_len)).enumerate() {
        let (mean, var) = moments(xg);
        let rstd = T::one() / (var + eps).sqrt();
        stats.mean.push(mean);
        stats.rstd.push(rstd);
        let g = gi % groups;
        for (k, (xc, yc)) in xg.chunks(spatial).zip(yg.chunks_mut(spatial)).enumerate() {
            let ch = g * cpg + k;
            let (ga, be) = (gamma[ch], beta[ch]);
            for (y, &v) in yc.iter_mut().zip(xc) {
                *y = (v - mean) * rstd * ga + be;
            }
        }
    }
    Ok((out, stats))
}

pub struct GroupNormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn group_norm_backward<T: Scalar>(
    shape: &[usize],
    x: &[T],
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
    grad_out: &[T],
) -> GroupNormGrads<T> {
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let group_len = cpg * spatial;
    let inv_len = T::one() / T::from_f64(group_len as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for (gi, ((xg, dyg), dxg)) in x
        .chunks(group_len)
        .zip(grad_out.chunks(group_len))
        .zip(gx.chunks_mut(group_len))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let g = gi % groups;
        // Sums of dy_hat and dy_hat * x_hat over the group.
        let mut sum_dyh = T::zero();
        let mut sum_dyh_xh = T::zero();
        for k in 0..cpg {
            let ch = g * cpg + k;
            let range = k * spatial..(k + 1) * spatial;
            let mut dgamma = T::zero();
            let mut dbeta = T::zero();
            for (&v, &dy) in xg[range.clone()].iter().zip(&dyg[range]) {
                let xh = (v - mean) * rstd;
                dgamma = dgamma + dy * xh;
                dbeta = dbeta + dy;
                let dyh = dy * gamma[ch];
                sum_dyh = sum_dyh + dyh;
                sum_dyh_xh = sum_dyh_xh + dyh * xh;
            }
            ggamma[ch] = ggamma[ch] + dgamma;
            gbeta[ch] = gbeta[ch] + dbeta;
        }
        let mean_dyh = sum_dyh * inv_len;
        let mean_dyh_xh = sum_dyh_xh * inv_len;
        for k in 0..cpg {
            let ch = g * cpg + k;
            let range = k * spatial..(k + 1) * spatial;
            for ((&v, &dy), dx) in xg[range.clone()]
                .iter()
                .zip(&dyg[range.clone()])
                .zip(&mut dxg[range])
            {
                let xh = (v - mean) * rstd;
                *dx = rstd * (dy * gamma[ch] - mean_dyh - xh * mean_dyh_xh);
            }
        }
    }
    GroupNormGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}

/// Standardizes each output-channel slice: `(w - mean) / sqrt(var + eps)`.
///
/// Returns the standardized weights and the per-channel reciprocal std.
pub fn weight_standardize_forward<T: Scalar>(shape: &[usize], w: &[T], eps: T) -> Result<(Vec<T>, Vec<T>)> {
    let cout = *shape
        .first()
        .ok_or_else(|| Error::config("weight_standardize on an empty shape"))?;
    let per = w.len() / cout;
    if per < 2 {
        return Err(Error::config(format!(
            "weight_standardize needs >= 2 elements per output channel, shape {shape:?}"
        )));
    }
    let mut out = vec![T::zero(); w.len()];
    let mut rstds = Vec::with_capacity(cout);
    for (wc, yc) in w.chunks(per).zip(out.chunks_mut(per)) {
        let (mean, var) = moments(wc);
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (y, &v) in yc.iter_mut().zip(wc) {
            *y = (v - mean) * rstd;
        }
    }
    Ok((out, rstds))
}

/// `dw = rstd * (dy - mean(dy) - y * mean(dy * y))` per output channel.
pub fn weight_standardize_backward<T: Scalar>(
    standardized: &[T],
    rstd: &[T],
    grad_out: &[T],
) -> Vec<T> {
    let per = standardized.len() / rstd.len();
    let inv = T::one() / T::from_f64(per as f64);
    let mut gw = vec![T::zero(); standardized.len()];
    for (c, ((yc, dyc), gc)) in standardized
        .chunks(per)
        .zip(grad_out.chunks(per))
        .zip(gw.chunks_mut(per))
        .enumerate()
    {
        let mean_dy = dyc.iter().copied().sum::<T>() * inv;
        let mean_dy_y = yc.iter().zip(dyc).map(|(&y, &d)| y * d).sum::<T>() * inv;
        for ((g, &y), &d) in gc.iter_mut().zip(yc).zip(dyc) {
            *g = rstd[c] * (d - mean_dy - y * mean_dy_y);
        }
    }
    gw
}
