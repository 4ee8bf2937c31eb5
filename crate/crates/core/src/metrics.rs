//! Overlap and surface-distance metrics on binary masks.

use crate::error::{Error, Result};
use crate::masks::BinaryMask;

pub const DEFAULT_DICE_EPS: f64 = 1e-5;

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|P∩Y| / (|P| + |Y| + eps)`.
pub fn dice_score(pred: &BinaryMask, target: &BinaryMask, eps: f64) -> Result<f64> {
    check_pair(pred, target)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        inter += (p & y) as usize;
        total += (p + y) as usize;
    }
    Ok(2.0 * inter as f64 / (total as f64 + eps))
}

/// Foreground voxels with at least one background 6-neighbour; outside the volume counts as background.
pub fn surface_voxels(mask: &BinaryMask) -> Vec<[usize; 3]> {
    let [ns, nh, nw] = mask.shape();
    let mut out = Vec::new();
    for s in 0..ns {
        for h in 0..nh {
            for w in 0..nw {
                if !mask.get(s, h, w) {
                    continue;
                }
                let interior = s > 0
                    && s + 1 < ns
                    && h > 0
                    && h + 1 < nh
                    && w > 0
                    && w + 1 < nw
                    && mask.get(s - 1, h, w)
                    && mask.get(s + 1, h, w)
                    && mask.get(s, h - 1, w)
                    && mask.get(s, h + 1, w)
                    && mask.get(s, h, w - 1)
                    && mask.get(s, h, w + 1);
                if !interior {
                    out.push([s, h, w]);
                }
            }
        }
    }
    out
}

pub(crate) fn squared_distance(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let x = (a[k] as f64 - b[k] as f64) * spacing[k];
        d += x * x;
    }
    d
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::config(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

fn surfaces(pred: &BinaryMask, target: &BinaryMask) -> Result<(Vec<[usize; 3]>, Vec<[usize; 3]>)> {
    check_pair(pred, target)?;
    if pred.count() == 0 {
        return Err(Error::UndefinedHausdorff("prediction is empty"));
    }
    if target.count() == 0 {
        return Err(Error::UndefinedHausdorff("target is empty"));
    }
    Ok((surface_voxels(pred), surface_voxels(target)))
}

/// Directed squared sup-inf distance with early exit once a point cannot raise the maximum.
fn directed_squared(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut worst = 0.0f64;
    for &a in from {
        let mut best = f64::INFINITY;
        for &b in to {
            let d = squared_distance(a, b, spacing);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance between the surfaces of two nonempty masks.
pub fn hausdorff_distance(pred: &BinaryMask, target: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    check_spacing(spacing)?;
    let (sp, sy) = surfaces(pred, target)?;
    let d = directed_squared(&sp, &sy, spacing).max(directed_squared(&sy, &sp, spacing));
    Ok(d.sqrt())
}

/// Same metric via a separable squared Euclidean distance transform.
///
/// Agrees bit-for-bit with [`hausdorff_distance`] for unit spacing.
pub fn hausdorff_distance_edt(pred: &BinaryMask, target: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    check_spacing(spacing)?;
    let (sp, sy) = surfaces(pred, target)?;
    let shape = pred.shape();
    let to_y = squared_edt(shape, &sy, spacing);
    let to_p = squared_edt(shape, &sp, spacing);
    let idx = |v: [usize; 3]| (v[0] * shape[1] + v[1]) * shape[2] + v[2];
    let mut worst = 0.0f64;
    for &a in &sp {
        worst = worst.max(to_y[idx(a)]);
    }
    for &b in &sy {
        worst = worst.max(to_p[idx(b)]);
    }
    Ok(worst.sqrt())
}

/// Squared distance from every voxel to the nearest of `sites`.
pub fn squared_edt(shape: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; shape.iter().product()];
    for &[s, h, w] in sites {
        f[(s * shape[1] + h) * shape[2] + w] = 0.0;
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in [2, 1, 0] {
        let n = shape[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| f[base + k * strides[axis]]));
                lower_envelope(&line, spacing[axis], &mut out);
                for k in 0..n {
                    f[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    f
}

/// 1D squared distance transform `d(p) = min_q f(q) + (sp (p - q))^2`.
fn lower_envelope(f: &[f64], sp: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let sp2 = sp * sp;
    let key = |q: usize| f[q] + sp2 * (q * q) as f64;
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    v.push(finite[0]);
    z.push(f64::NEG_INFINITY);
    for &q in &finite[1..] {
        loop {
            let r = *v.last().expect("envelope never empties");
            let s = (key(q) - key(r)) / (2.0 * sp2 * (q - r) as f64);
            if s <= *z.last().expect("z tracks v") && v.len() > 1 {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for p in 0..n {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = (p as f64 - v[k] as f64) * sp;
        out.push(d * d + f[v[k]]);
    }
}
