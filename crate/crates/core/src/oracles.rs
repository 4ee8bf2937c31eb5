//! Deliberately naive reference implementations used to cross-check the fast paths.

use crate::masks::{BinaryMask, ResidualAxis};

/// Dice by explicit voxel counting.
pub fn dice(pred: &BinaryMask, target: &BinaryMask, eps: f64) -> f64 {
    let [ns, nh, nw] = pred.shape();
    let (mut p, mut y, mut both) = (0u64, 0u64, 0u64);
    for s in 0..ns {
        for h in 0..nh {
            for w in 0..nw {
                let (a, b) = (pred.get(s, h, w), target.get(s, h, w));
                p += a as u64;
                y += b as u64;
                both += (a && b) as u64;
            }
        }
    }
    2.0 * both as f64 / ((p + y) as f64 + eps)
}

/// Residual mask by coordinate lookup of the previous slice.
pub fn residual_mask(seg: &BinaryMask, axis: ResidualAxis) -> BinaryMask {
    let a = axis.spatial_index();
    BinaryMask::from_fn(seg.shape(), |s, h, w| {
        let here = [s, h, w];
        if here[a] == 0 {
            return false;
        }
        let mut prev = here;
        prev[a] -= 1;
        seg.get(here[0], here[1], here[2]) != seg.get(prev[0], prev[1], prev[2])
    })
}

fn surface(mask: &BinaryMask) -> Vec<[i64; 3]> {
    let shape = mask.shape().map(|d| d as i64);
    let inside = |p: [i64; 3]| {
        (0..3).all(|k| p[k] >= 0 && p[k] < shape[k]) && mask.get(p[0] as usize, p[1] as usize, p[2] as usize)
    };
    let offsets = [
        [-1, 0, 0],
        [1, 0, 0],
        [0, -1, 0],
        [0, 1, 0],
        [0, 0, -1],
        [0, 0, 1],
    ];
    let mut out = Vec::new();
    for s in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let p = [s, h, w];
                if inside(p) && offsets.iter().any(|o| !inside([p[0] + o[0], p[1] + o[1], p[2] + o[2]])) {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// All-pairs Hausdorff distance; `None` when either mask is empty.
pub fn hausdorff(pred: &BinaryMask, target: &BinaryMask, spacing: [f64; 3]) -> Option<f64> {
    let (a, b) = (surface(pred), surface(target));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let dist = |p: [i64; 3], q: [i64; 3]| {
        let mut d = 0.0;
        for k in 0..3 {
            let x = (p[k] - q[k]) as f64 * spacing[k];
            d += x * x;
        }
        d.sqrt()
    };
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&a, &b).max(directed(&b, &a)))
}

/// Plain summed binary cross entropy with the same probability floor as the losses.
pub fn summed_bce(pred: &[f64], target: &[f64], floor: f64) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(floor, 1.0 - floor);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}
