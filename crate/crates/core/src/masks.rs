//! Binary and multi-class label volumes and their inter-slice residual masks.
//!
//! A residual mask marks voxels whose label differs from the voxel one step
//! back along the chosen axis; the first slice along that axis is zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Axis along which adjacent-slice differences are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResidualAxis {
    /// Slice axis `S`.
    #[default]
    Axial,
    /// Height axis `H`.
    Sagittal,
    /// Width axis `W`.
    Coronal,
}

impl ResidualAxis {
    pub const ALL: [ResidualAxis; 3] = [Self::Axial, Self::Sagittal, Self::Coronal];

    /// Index into a spatial `[S, H, W]` triple.
    pub fn spatial_index(self) -> usize {
        match self {
            Self::Axial => 0,
            Self::Sagittal => 1,
            Self::Coronal => 2,
        }
    }

    /// Tensor dimension for a tensor whose last three axes are `[S, H, W]`.
    pub fn dim_of(self, ndim: usize) -> usize {
        ndim - 3 + self.spatial_index()
    }
}

impl fmt::Display for ResidualAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Axial => "axial",
            Self::Sagittal => "sagittal",
            Self::Coronal => "coronal",
        })
    }
}

impl FromStr for ResidualAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Self::Axial),
            "sagittal" => Ok(Self::Sagittal),
            "coronal" => Ok(Self::Coronal),
            other => Err(Error::config(format!(
                "unknown residual axis `{other}` (expected axial, sagittal or coronal)"
            ))),
        }
    }
}

fn check_spatial(shape: [usize; 3], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != len {
        return Err(Error::validation(format!(
            "mask shape {shape:?} does not match {len} voxels"
        )));
    }
    Ok(())
}

/// Voxel mask with values exactly 0 or 1, shape `[S, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_spatial(shape, data.len())?;
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::validation(format!("binary mask holds value {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for s in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    data.push(f(s, h, w) as u8);
                }
            }
        }
        Self { shape, data }
    }

    /// Values `> threshold` become foreground. `values` must hold `S*H*W` entries.
    pub fn threshold<T: Scalar>(shape: [usize; 3], values: &[T], threshold: f64) -> Result<Self> {
        check_spatial(shape, values.len())?;
        Ok(Self {
            shape,
            data: values.iter().map(|&v| (v.to_f64() > threshold) as u8).collect(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, s: usize, h: usize, w: usize) -> bool {
        self.data[(s * self.shape[1] + h) * self.shape[2] + w] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.to_vec(),
            self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect(),
        )
    }

    /// The plane at index 0 along `axis`, in row-major order of the remaining axes.
    pub fn first_slice(&self, axis: ResidualAxis) -> Vec<u8> {
        let a = axis.spatial_index();
        let mut out = Vec::new();
        for s in 0..self.shape[0] {
            for h in 0..self.shape[1] {
                for w in 0..self.shape[2] {
                    if [s, h, w][a] == 0 {
                        out.push(self.data[(s * self.shape[1] + h) * self.shape[2] + w]);
                    }
                }
            }
        }
        out
    }
}

fn axis_stride(shape: [usize; 3], axis: ResidualAxis) -> usize {
    match axis {
        ResidualAxis::Axial => shape[1] * shape[2],
        ResidualAxis::Sagittal => shape[2],
        ResidualAxis::Coronal => 1,
    }
}

fn coord_along(shape: [usize; 3], index: usize, axis: ResidualAxis) -> usize {
    let w = index % shape[2];
    let h = (index / shape[2]) % shape[1];
    let s = index / (shape[1] * shape[2]);
    [s, h, w][axis.spatial_index()]
}

/// `out[s+1] = |seg[s+1] - seg[s]|` along `axis`, first slice zero.
pub fn compute_residual_mask(seg: &BinaryMask, axis: ResidualAxis) -> Result<BinaryMask> {
    if seg.shape[axis.spatial_index()] < 2 {
        return Err(Error::config(format!(
            "residual mask needs extent >= 2 along the {axis} axis, shape {:?}",
            seg.shape
        )));
    }
    let stride = axis_stride(seg.shape, axis);
    let data = (0..seg.data.len())
        .map(|i| {
            if coord_along(seg.shape, i, axis) == 0 {
                0
            } else {
                seg.data[i] ^ seg.data[i - stride]
            }
        })
        .collect();
    Ok(BinaryMask {
        shape: seg.shape,
        data,
    })
}

/// Rebuilds a mask from its first slice along `axis` and its residual mask.
pub fn reconstruct_from_residual(
    first_slice: &[u8],
    residual: &BinaryMask,
    axis: ResidualAxis,
) -> Result<BinaryMask> {
    let shape = residual.shape;
    let plane = shape.iter().product::<usize>() / shape[axis.spatial_index()];
    if first_slice.len() != plane {
        return Err(Error::validation(format!(
            "first slice holds {} voxels, expected {plane}",
            first_slice.len()
        )));
    }
    let stride = axis_stride(shape, axis);
    let mut data = vec![0u8; residual.data.len()];
    let mut next_first = first_slice.iter();
    for i in 0..data.len() {
        data[i] = if coord_along(shape, i, axis) == 0 {
            *next_first.next().expect("plane size checked")
        } else {
            data[i - stride] ^ residual.data[i]
        };
    }
    BinaryMask::new(shape, data)
}

/// Label volume with values `0..=classes` (0 is background), shape `[S, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    labels: Vec<u8>,
    classes: usize,
}

impl LabelVolume {
    /// `classes` counts foreground classes.
    pub fn new(shape: [usize; 3], labels: Vec<u8>, classes: usize) -> Result<Self> {
        check_spatial(shape, labels.len())?;
        if classes == 0 || classes > u8::MAX as usize {
            return Err(Error::validation(format!("invalid class count {classes}")));
        }
        if let Some(bad) = labels.iter().find(|&&v| v as usize > classes) {
            return Err(Error::validation(format!(
                "label {bad} outside 0..={classes}"
            )));
        }
        Ok(Self {
            shape,
            labels,
            classes,
        })
    }

    pub fn from_binary(mask: &BinaryMask) -> Self {
        Self {
            shape: mask.shape,
            labels: mask.data.clone(),
            classes: 1,
        }
    }

    /// Decodes a one-hot `[C+1, S, H, W]` tensor.
    pub fn from_one_hot<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] < 2 {
            return Err(Error::validation(format!("one-hot tensor must be [C+1, S, H, W], got {s:?}")));
        }
        let plane: usize = s[1..].iter().product();
        let mut labels = vec![0u8; plane];
        for (v, label) in labels.iter_mut().enumerate() {
            let mut hot = None;
            for c in 0..s[0] {
                let x = t.data()[c * plane + v].to_f64();
                if x == 1.0 {
                    if hot.is_some() {
                        return Err(Error::validation("one-hot voxel has two hot classes"));
                    }
                    hot = Some(c);
                } else if x != 0.0 {
                    return Err(Error::validation(format!("one-hot entry {x} is not 0 or 1")));
                }
            }
            *label = hot.ok_or_else(|| Error::validation("one-hot voxel sums to 0"))? as u8;
        }
        Self::new([s[1], s[2], s[3]], labels, s[0] - 1)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Voxels equal to `class`.
    pub fn class_mask(&self, class: usize) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            data: self.labels.iter().map(|&l| (l as usize == class) as u8).collect(),
        }
    }

    /// Voxels with label `>= level`; nested targets for multi-target binary mode.
    pub fn at_least(&self, level: usize) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            data: self.labels.iter().map(|&l| (l as usize >= level) as u8).collect(),
        }
    }

    pub fn foreground(&self) -> BinaryMask {
        self.at_least(1)
    }

    /// `[C+1, S, H, W]` one-hot encoding.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.labels.len();
        let mut data = vec![T::zero(); (self.classes + 1) * plane];
        for (v, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + v] = T::one();
        }
        Tensor::from_parts(
            vec![self.classes + 1, self.shape[0], self.shape[1], self.shape[2]],
            data,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Per-foreground-class residual masks; background is excluded.
pub fn compute_residual_mask_multiclass(
    seg: &LabelVolume,
    axis: ResidualAxis,
) -> Result<Vec<BinaryMask>> {
    (1..=seg.classes)
        .map(|c| compute_residual_mask(&seg.class_mask(c), axis))
        .collect()
}

/// Stacks equally shaped masks into a `[K, S, H, W]` tensor.
pub fn stack_masks<T: Scalar>(masks: &[BinaryMask]) -> Result<Tensor<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::validation("cannot stack zero masks"))?;
    let mut data = Vec::with_capacity(masks.len() * first.len());
    for m in masks {
        if m.shape != first.shape {
            return Err(Error::validation(format!(
                "mask shapes differ: {:?} vs {:?}",
                m.shape, first.shape
            )));
        }
        data.extend(m.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
    }
    let s = first.shape;
    Tensor::new(vec![masks.len(), s[0], s[1], s[2]], data)
}
