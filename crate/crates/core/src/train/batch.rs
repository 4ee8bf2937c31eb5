use crate::autodiff::{Graph, Var};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::losses::{res_loss_level, res_loss_total, seg_loss, Reduction};
use crate::masks::{compute_residual_mask, compute_residual_mask_multiclass, BinaryMask};
use crate::model::{ModelConfig, OutputMode};
use crate::tensor::{Scalar, Tensor};

/// Network input with its segmentation and residual targets, all `[N, C, S, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub image: Tensor<T>,
    pub seg_target: Tensor<T>,
    pub res_target: Tensor<T>,
}

impl Batch<f32> {
    pub fn cast<T: Scalar>(&self) -> Batch<T> {
        Batch {
            image: self.image.cast(),
            seg_target: self.seg_target.cast(),
            res_target: self.res_target.cast(),
        }
    }
}

fn push_mask(out: &mut Vec<f32>, m: &BinaryMask) {
    out.extend(m.data().iter().map(|&v| v as f32));
}

/// Segmentation target masks and residual masks for one sample under `mode`.
pub fn sample_targets(sample: &VolumeSample, config: &ModelConfig) -> Result<(Vec<BinaryMask>, Vec<BinaryMask>)> {
    let label = &sample.label;
    let axis = config.residual_axis;
    match config.mode {
        OutputMode::Binary { targets } => {
            if label.classes() > targets {
                return Err(Error::validation(format!(
                    "sample `{}` has {} classes, model predicts {targets} targets",
                    sample.id,
                    label.classes()
                )));
            }
            let seg: Vec<BinaryMask> = (1..=targets).map(|k| label.at_least(k)).collect();
            let res = seg
                .iter()
                .map(|m| compute_residual_mask(m, axis))
                .collect::<Result<_>>()?;
            Ok((seg, res))
        }
        OutputMode::Multiclass { classes } => {
            if label.classes() != classes {
                return Err(Error::validation(format!(
                    "sample `{}` has {} classes, model expects {classes}",
                    sample.id,
                    label.classes()
                )));
            }
            let seg = (0..=classes).map(|c| label.class_mask(c)).collect();
            Ok((seg, compute_residual_mask_multiclass(label, axis)?))
        }
    }
}

/// Stacks equally shaped samples into a batch.
pub fn make_batch(samples: &[VolumeSample], config: &ModelConfig) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("cannot build an empty batch"))?;
    let [s, h, w] = first.spatial_shape();
    let c = first.channels();
    if c != config.in_channels {
        return Err(Error::validation(format!(
            "samples have {c} channels, model expects {}",
            config.in_channels
        )));
    }
    let (mut image, mut seg, mut res) = (Vec::new(), Vec::new(), Vec::new());
    for sample in samples {
        if sample.spatial_shape() != [s, h, w] || sample.channels() != c {
            return Err(Error::validation("batch samples differ in shape"));
        }
        image.extend_from_slice(sample.image.data());
        let (seg_masks, res_masks) = sample_targets(sample, config)?;
        seg_masks.iter().for_each(|m| push_mask(&mut seg, m));
        res_masks.iter().for_each(|m| push_mask(&mut res, m));
    }
    let n = samples.len();
    Ok(Batch {
        image: Tensor::new(vec![n, c, s, h, w], image)?,
        seg_target: Tensor::new(vec![n, config.mode.seg_channels(), s, h, w], seg)?,
        res_target: Tensor::new(vec![n, config.mode.res_channels(), s, h, w], res)?,
    })
}

/// Loss options that shape the objective, independent of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub dice_eps: f64,
    /// Per-voxel reduction of the BCE terms.
    pub reduction: Reduction,
    /// How segmentation losses combine across target channels.
    pub target_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            dice_eps: 1e-5,
            reduction: Reduction::Sum,
            target_reduction: Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub seg: Var,
    /// Absent for the baseline variant.
    pub res: Option<Var>,
    pub total: Var,
}

/// Records `L_seg + L_res` for already computed forward outputs.
pub fn record_loss<T: Scalar>(
    g: &mut Graph<T>,
    seg_probs: Var,
    res_probs: &[Var],
    batch: &Batch<T>,
    loss: &LossConfig,
) -> Result<LossVars> {
    let mut seg = seg_loss(g, seg_probs, &batch.seg_target, loss.dice_eps, loss.reduction)?;
    if loss.target_reduction == Reduction::Mean {
        seg = g.mul_scalar(seg, 1.0 / batch.seg_target.shape()[1] as f64);
    }
    let res = match res_probs {
        [] => None,
        [l0, l1, l2] => {
            let mut levels = [*l0, *l1, *l2];
            for v in &mut levels {
                *v = res_loss_level(g, *v, &batch.res_target, loss.reduction)?;
            }
            Some(res_loss_total(g, levels, loss.lambda)?)
        }
        other => {
            return Err(Error::Usage(format!(
                "expected 0 or 3 residual predictions, got {}",
                other.len()
            )))
        }
    };
    let total = match res {
        Some(r) => g.add(seg, r)?,
        None => seg,
    };
    Ok(LossVars { seg, res, total })
}
