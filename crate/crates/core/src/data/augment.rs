use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::LabelVolume;
use crate::model::DOWNSAMPLE;
use crate::tensor::Tensor;

use super::VolumeSample;

const FG_RETRIES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Independent flip probability per spatial axis.
    pub flip_prob: f64,
    /// Inclusive range of the intensity scale factor.
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: (0.9, 1.1),
        }
    }
}

/// Source index for each destination voxel of a `[S, H, W]` grid.
fn remap(shape: [usize; 3], mut src: impl FnMut(usize, usize, usize) -> usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(shape.iter().product());
    for s in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                out.push(src(s, h, w));
            }
        }
    }
    out
}

fn gather(sample: &VolumeSample, dst_shape: [usize; 3], index: &[usize]) -> Result<VolumeSample> {
    let c = sample.channels();
    let src_plane: usize = sample.spatial_shape().iter().product();
    let mut image = Vec::with_capacity(c * index.len());
    for ch in 0..c {
        let base = &sample.image.data()[ch * src_plane..(ch + 1) * src_plane];
        image.extend(index.iter().map(|&i| base[i]));
    }
    let labels = index.iter().map(|&i| sample.label.labels()[i]).collect();
    Ok(VolumeSample {
        image: Tensor::new(vec![c, dst_shape[0], dst_shape[1], dst_shape[2]], image)?,
        label: LabelVolume::new(dst_shape, labels, sample.label.classes())?,
        spacing: sample.spacing,
        id: sample.id.clone(),
    })
}

/// Mirrors image and label along each flagged spatial axis.
pub fn flip(sample: &VolumeSample, axes: [bool; 3]) -> VolumeSample {
    let shape = sample.spatial_shape();
    let index = remap(shape, |s, h, w| {
        let p = [s, h, w];
        let q: Vec<usize> = (0..3).map(|k| if axes[k] { shape[k] - 1 - p[k] } else { p[k] }).collect();
        (q[0] * shape[1] + q[1]) * shape[2] + q[2]
    });
    gather(sample, shape, &index).expect("flip preserves shapes")
}

/// Multiplies image intensities by `factor`; labels are untouched.
pub fn scale_intensity(sample: &VolumeSample, factor: f64) -> VolumeSample {
    VolumeSample {
        image: sample.image.map(|v| (v as f64 * factor) as f32),
        ..sample.clone()
    }
}

/// Random flips followed by random intensity scaling. Draw order: three flip
/// coins (S, H, W), then the scale factor.
pub fn augment(sample: &VolumeSample, config: &AugmentConfig, rng: &mut impl Rng) -> VolumeSample {
    let axes = [0; 3].map(|_| rng.random_bool(config.flip_prob));
    let (lo, hi) = config.scale_range;
    let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let flipped = if axes.iter().any(|&a| a) { flip(sample, axes) } else { sample.clone() };
    if factor == 1.0 {
        flipped
    } else {
        scale_intensity(&flipped, factor)
    }
}

fn check_patch(volume: [usize; 3], patch: [usize; 3]) -> Result<()> {
    if patch.iter().zip(&volume).any(|(p, v)| p > v || *p == 0) {
        return Err(Error::config(format!(
            "patch {patch:?} does not fit inside volume {volume:?}"
        )));
    }
    if patch.iter().any(|p| p % DOWNSAMPLE != 0) {
        return Err(Error::config(format!(
            "patch {patch:?} must be divisible by {DOWNSAMPLE} along every axis"
        )));
    }
    Ok(())
}

fn has_foreground(label: &LabelVolume, corner: [usize; 3], patch: [usize; 3]) -> bool {
    let shape = label.shape();
    let labels = label.labels();
    for s in corner[0]..corner[0] + patch[0] {
        for h in corner[1]..corner[1] + patch[1] {
            let row = (s * shape[1] + h) * shape[2];
            if labels[row + corner[2]..row + corner[2] + patch[2]].iter().any(|&l| l > 0) {
                return true;
            }
        }
    }
    false
}

/// Uniform patch corner; with probability `fg_bias` it is redrawn until the
/// patch holds foreground (bounded retries).
pub fn choose_corner(
    sample: &VolumeSample,
    patch: [usize; 3],
    rng: &mut impl Rng,
    fg_bias: f64,
) -> Result<[usize; 3]> {
    let volume = sample.spatial_shape();
    check_patch(volume, patch)?;
    let draw = |rng: &mut _| -> [usize; 3] {
        let mut c = [0; 3];
        for k in 0..3 {
            c[k] = random_upto(rng, volume[k] - patch[k]);
        }
        c
    };
    let mut corner = draw(rng);
    if rng.random_bool(fg_bias.clamp(0.0, 1.0)) {
        for _ in 0..FG_RETRIES {
            if has_foreground(&sample.label, corner, patch) {
                break;
            }
            corner = draw(rng);
        }
    }
    Ok(corner)
}

fn random_upto(rng: &mut impl Rng, max: usize) -> usize {
    if max == 0 {
        0
    } else {
        rng.random_range(0..=max)
    }
}

/// Cuts the `patch`-sized block starting at `corner` out of image and label.
pub fn crop_at(sample: &VolumeSample, corner: [usize; 3], patch: [usize; 3]) -> Result<VolumeSample> {
    let volume = sample.spatial_shape();
    if (0..3).any(|k| corner[k] + patch[k] > volume[k] || patch[k] == 0) {
        return Err(Error::config(format!(
            "patch {patch:?} at {corner:?} leaves volume {volume:?}"
        )));
    }
    let index = remap(patch, |s, h, w| {
        ((s + corner[0]) * volume[1] + h + corner[1]) * volume[2] + w + corner[2]
    });
    gather(sample, patch, &index)
}

pub fn crop_patch(
    sample: &VolumeSample,
    patch: [usize; 3],
    rng: &mut impl Rng,
    fg_bias: f64,
) -> Result<VolumeSample> {
    let corner = choose_corner(sample, patch, rng, fg_bias)?;
    crop_at(sample, corner, patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use crate::metrics::dice_score;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> VolumeSample {
        generate_phantom(&PhantomSpec {
            shape: [16, 24, 32],
            radius: (2.0, 4.0),
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn flips_are_involutions_and_keep_counts() {
        let s = sample();
        let twice = flip(&flip(&s, [true; 3]), [true; 3]);
        assert_eq!(twice, s);
        let once = flip(&s, [true, false, true]);
        assert_eq!(once.label.class_counts(), s.label.class_counts());
    }

    #[test]
    fn flipping_both_masks_keeps_dice() {
        let s = sample();
        let target = s.label.foreground();
        let shifted = crate::masks::BinaryMask::from_fn(target.shape(), |a, b, c| c > 0 && target.get(a, b, c - 1));
        let before = dice_score(&shifted, &target, 1e-5).unwrap();
        let f = |m: &crate::masks::BinaryMask| {
            let [ns, nh, nw] = m.shape();
            crate::masks::BinaryMask::from_fn(m.shape(), |a, b, c| m.get(ns - 1 - a, nh - 1 - b, nw - 1 - c))
        };
        assert_eq!(dice_score(&f(&shifted), &f(&target), 1e-5).unwrap(), before);
    }

    #[test]
    fn unit_scale_is_identity() {
        let s = sample();
        assert_eq!(scale_intensity(&s, 1.0), s);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
        };
        assert_eq!(augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), s);
    }

    #[test]
    fn augment_never_changes_label_counts() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = augment(&s, &AugmentConfig::default(), &mut rng);
            assert_eq!(a.label.class_counts(), s.label.class_counts());
        }
    }

    #[test]
    fn full_patch_is_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(crop_patch(&s, [16, 24, 32], &mut rng, 0.5).unwrap(), s);
    }

    #[test]
    fn foreground_bias_finds_foreground() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = crop_patch(&s, [8, 8, 8], &mut rng, 1.0).unwrap();
            assert!(p.label.labels().iter().any(|&l| l > 0));
        }
    }

    #[test]
    fn bad_patches_rejected() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(crop_patch(&s, [24, 8, 8], &mut rng, 0.0), Err(Error::Config(_))));
        assert!(matches!(crop_patch(&s, [12, 8, 8], &mut rng, 0.0), Err(Error::Config(_))));
    }
}
