use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::LabelVolume;
use crate::tensor::Tensor;

use super::VolumeSample;

const MAX_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectFamily {
    Sphere,
    Ellipsoid,
    /// Ellipsoid with a low-frequency angular perturbation that twists from slice to slice.
    Lobed,
    /// Family drawn uniformly per object.
    #[default]
    Mixed,
}

impl std::str::FromStr for ObjectFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "ellipsoid" => Ok(Self::Ellipsoid),
            "lobed" => Ok(Self::Lobed),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::config(format!("unknown object family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Volume extents `[S, H, W]`.
    pub shape: [usize; 3],
    pub channels: usize,
    /// Inclusive range for the number of objects.
    pub objects: (usize, usize),
    pub family: ObjectFamily,
    /// Inclusive range for semi-axis lengths, in voxels.
    pub radius: (f64, f64),
    /// Foreground classes; each object draws one uniformly.
    pub classes: usize,
    pub background: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 64, 64],
            channels: 1,
            objects: (1, 3),
            family: ObjectFamily::Mixed,
            radius: (4.0, 10.0),
            classes: 1,
            background: 0.0,
            contrast: 1.0,
            noise_std: 0.3,
            spacing: [1.0; 3],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) || self.channels == 0 {
            return Err(Error::config("phantom shape and channel count must be >= 1"));
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return Err(Error::config(format!("invalid object count range {:?}", self.objects)));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::config(format!("invalid radius range {:?}", self.radius)));
        }
        if self.classes == 0 || self.classes > u8::MAX as usize {
            return Err(Error::config(format!("invalid class count {}", self.classes)));
        }
        if !(self.noise_std >= 0.0) || !self.contrast.is_finite() || !self.background.is_finite() {
            return Err(Error::config("noise std must be >= 0 and intensities finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobes {
    pub count: u32,
    /// Relative radial modulation.
    pub amplitude: f64,
    pub phase: f64,
    /// Rotation of the lobe pattern across the object's slice extent, in radians.
    pub twist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomObject {
    /// Centre in voxel coordinates `[s, h, w]`.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub lobes: Option<Lobes>,
    pub class: u8,
    /// Intensity offset over background inside the object.
    pub contrast: f64,
}

impl PhantomObject {
    /// Largest distance from the centre that can be inside, per axis.
    pub fn extent(&self) -> [f64; 3] {
        let grow = 1.0 + self.lobes.map_or(0.0, |l| l.amplitude);
        self.radii.map(|r| r * grow)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d: Vec<f64> = (0..3).map(|k| (p[k] - self.center[k]) / self.radii[k]).collect();
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let bound = match self.lobes {
            None => 1.0,
            Some(l) => {
                let theta = d[1].atan2(d[2]) + l.twist * d[0];
                1.0 + l.amplitude * (l.count as f64 * theta + l.phase).cos()
            }
        };
        rho <= bound
    }
}

/// Label volume with later objects painted over earlier ones.
pub fn rasterize(shape: [usize; 3], objects: &[PhantomObject], classes: usize) -> Result<LabelVolume> {
    let mut labels = vec![0u8; shape.iter().product()];
    for o in objects {
        let ext = o.extent();
        let lo: Vec<usize> = (0..3).map(|k| (o.center[k] - ext[k]).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = (0..3)
            .map(|k| ((o.center[k] + ext[k]).ceil() as usize).min(shape[k] - 1))
            .collect();
        for s in lo[0]..=hi[0] {
            for h in lo[1]..=hi[1] {
                for w in lo[2]..=hi[2] {
                    if o.contains([s as f64, h as f64, w as f64]) {
                        labels[(s * shape[1] + h) * shape[2] + w] = o.class;
                    }
                }
            }
        }
    }
    LabelVolume::new(shape, labels, classes)
}

fn draw_object(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Option<PhantomObject> {
    let family = match spec.family {
        ObjectFamily::Mixed => [ObjectFamily::Sphere, ObjectFamily::Ellipsoid, ObjectFamily::Lobed][rng.random_range(0..3)],
        f => f,
    };
    let (lo, hi) = spec.radius;
    let mut draw = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let radii = match family {
        ObjectFamily::Sphere => [draw(); 3],
        _ => [draw(), draw(), draw()],
    };
    let lobes = (family == ObjectFamily::Lobed).then(|| Lobes {
        count: rng.random_range(2..=4),
        amplitude: rng.random_range(0.15..=0.3),
        phase: rng.random_range(0.0..2.0 * PI),
        twist: rng.random_range(0.3..=1.0),
    });
    let mut object = PhantomObject {
        center: [0.0; 3],
        radii,
        lobes,
        class: rng.random_range(1..=spec.classes) as u8,
        contrast: spec.contrast * rng.random_range(0.8..=1.2),
    };
    let ext = object.extent();
    for k in 0..3 {
        let room = spec.shape[k] as f64 - 1.0 - 2.0 * ext[k];
        if room < 0.0 {
            return None;
        }
        object.center[k] = ext[k] + rng.random_range(0.0..=room);
    }
    Some(object)
}

/// Draws the objects of a phantom; retries unplaceable draws a bounded number of times.
pub fn draw_objects(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<PhantomObject>> {
    let (lo, hi) = spec.objects;
    let count = rng.random_range(lo..=hi);
    (0..count)
        .map(|i| {
            (0..MAX_TRIES).find_map(|_| draw_object(spec, rng)).ok_or_else(|| {
                Error::Generation(format!(
                    "object {i} with radii in {:?} does not fit a {:?} volume after {MAX_TRIES} tries",
                    spec.radius, spec.shape
                ))
            })
        })
        .collect()
}

/// Background plus per-object contrast plus Gaussian noise; channel `c` scales contrast by `1/(c+1)`.
pub fn render_image(
    spec: &PhantomSpec,
    objects: &[PhantomObject],
    label_of: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let plane: usize = spec.shape.iter().product();
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite std"));
    let mut data = Vec::with_capacity(spec.channels * plane);
    for c in 0..spec.channels {
        let gain = 1.0 / (c as f64 + 1.0);
        for &owner in label_of {
            let mut v = spec.background;
            if owner > 0 {
                v += objects[owner - 1].contrast * gain;
            }
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            data.push(v as f32);
        }
    }
    Tensor::from_parts(vec![spec.channels, spec.shape[0], spec.shape[1], spec.shape[2]], data)
}

/// Deterministic synthetic sample for `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumeSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_TRIES {
        let objects = draw_objects(spec, &mut rng)?;
        let label = rasterize(spec.shape, &objects, spec.classes)?;
        if label.labels().iter().all(|&l| l == 0) {
            continue;
        }
        // index (1-based) of the object that painted each voxel
        let mut owner = vec![0usize; label.labels().len()];
        for (i, o) in objects.iter().enumerate() {
            let single = rasterize(spec.shape, std::slice::from_ref(o), spec.classes)?;
            for (dst, &l) in owner.iter_mut().zip(single.labels()) {
                if l != 0 {
                    *dst = i + 1;
                }
            }
        }
        let image = render_image(spec, &objects, &owner, &mut rng);
        return VolumeSample::new(image, label, spec.spacing, format!("phantom-{}", spec.seed));
    }
    Err(Error::Generation(format!(
        "no foreground voxel after {MAX_TRIES} attempts for {:?}",
        spec.shape
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{compute_residual_mask, ResidualAxis};

    #[test]
    fn sphere_residual_on_every_crossed_slice_pair() {
        let shape = [24, 24, 24];
        let sphere = PhantomObject {
            center: [12.0; 3],
            radii: [5.0; 3],
            lobes: None,
            class: 1,
            contrast: 1.0,
        };
        let label = rasterize(shape, &[sphere], 1).unwrap();
        let res = compute_residual_mask(&label.foreground(), ResidualAxis::Axial).unwrap();
        let plane = 24 * 24;
        let slice_count = |m: &[u8], s: usize| m[s * plane..(s + 1) * plane].iter().filter(|&&v| v == 1).count();
        // independent count: lattice points of the disk x^2 + y^2 <= 25 - dz^2 in one slice but not the other
        let disk = |s: usize, h: i64, w: i64| {
            let dz = s as i64 - 12;
            h * h + w * w + dz * dz <= 25
        };
        for s in 1..24 {
            let mut expected = 0;
            for h in -12..12 {
                for w in -12..12 {
                    expected += (disk(s, h, w) != disk(s - 1, h, w)) as usize;
                }
            }
            assert_eq!(slice_count(res.data(), s), expected, "slice {s}");
        }
        // the slices at |dz| = 1 and 2 coincide: no lattice point has x^2 + y^2 in {22, 23, 24}
        assert_eq!(slice_count(res.data(), 11), 0);
        assert!(slice_count(res.data(), 12) > 0);
        // mirror symmetry about the centre slice: pairs (s-1,s) and (24-s,25-s) see the same change
        for s in 2..12 {
            assert_eq!(slice_count(res.data(), s), slice_count(res.data(), 25 - s));
        }
    }

    #[test]
    fn noiseless_single_object_has_two_intensities() {
        let spec = PhantomSpec {
            shape: [16, 16, 16],
            objects: (1, 1),
            radius: (3.0, 5.0),
            noise_std: 0.0,
            seed: 3,
            ..Default::default()
        };
        let sample = generate_phantom(&spec).unwrap();
        let mut values: Vec<f32> = sample.image.data().to_vec();
        values.sort_by(f32::total_cmp);
        values.dedup();
        assert_eq!(values.len(), 2);
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = PhantomSpec {
            shape: [16, 32, 32],
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = PhantomSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_phantom(&spec).unwrap(), generate_phantom(&other).unwrap());
    }

    #[test]
    fn oversized_objects_fail_after_retries() {
        let spec = PhantomSpec {
            shape: [8, 8, 8],
            radius: (6.0, 7.0),
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn lobed_objects_fit_and_vary_between_slices() {
        for seed in 0..10 {
            let spec = PhantomSpec {
                shape: [16, 32, 32],
                family: ObjectFamily::Lobed,
                radius: (3.0, 6.0),
                classes: 2,
                seed,
                ..Default::default()
            };
            let sample = generate_phantom(&spec).unwrap();
            assert!(sample.label.labels().iter().any(|&l| l > 0));
            let res = compute_residual_mask(&sample.label.foreground(), ResidualAxis::Axial).unwrap();
            assert!(res.count() > 0);
        }
    }
}
