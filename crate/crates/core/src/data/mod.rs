//! Synthetic phantoms, intensity preprocessing, augmentation, patch cropping
//! and the volume container format.

mod augment;
mod phantom;
mod preprocess;
mod volume_io;

pub use augment::{augment, choose_corner, crop_at, crop_patch, flip, scale_intensity, AugmentConfig};
pub use phantom::{draw_objects, generate_phantom, rasterize, render_image, Lobes, ObjectFamily, PhantomObject, PhantomSpec};
pub use preprocess::{truncate_intensity, zscore_normalize};
pub use volume_io::{decode_volume, encode_volume, read_volume, write_volume, VOLUME_MAGIC};

use crate::error::{Error, Result};
use crate::masks::LabelVolume;
use crate::tensor::Tensor;

/// An intensity volume with its label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// `[C, S, H, W]`.
    pub image: Tensor<f32>,
    pub label: LabelVolume,
    /// Voxel spacing in mm along `[S, H, W]`.
    pub spacing: [f64; 3],
    pub id: String,
}

impl VolumeSample {
    pub fn new(image: Tensor<f32>, label: LabelVolume, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        let s = VolumeSample {
            image,
            label,
            spacing,
            id: id.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 4 || shape[1..] != self.label.shape() {
            return Err(Error::validation(format!(
                "image shape {shape:?} does not match label shape {:?}",
                self.label.shape()
            )));
        }
        if !self.image.is_finite() {
            return Err(Error::validation(format!("image `{}` holds non-finite values", self.id)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::validation(format!("invalid spacing {:?}", self.spacing)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        self.label.shape()
    }
}
