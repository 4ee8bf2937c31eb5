use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::metrics::{dice_score, hausdorff_distance_edt};
use crate::model::{predict, ModelConfig, ModelParams, OutputMode};
use crate::tensor::Tensor;

use super::batch::{make_batch, record_loss, sample_targets, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Sliding-window tile; clipped to the volume where it is larger.
    pub patch: [usize; 3],
    pub threshold: f64,
    pub dice_eps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            patch: [16, 32, 32],
            threshold: 0.5,
            dice_eps: 1e-5,
        }
    }
}

/// Whole-volume prediction; tensors are `[K, S, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePrediction {
    pub seg_logits: Tensor<f32>,
    pub seg: Tensor<f32>,
    pub res: Vec<Tensor<f32>>,
}

/// Tile origins along one axis with 50% overlap, always covering the last voxel.
pub fn tile_starts(extent: usize, patch: usize) -> Vec<usize> {
    if patch >= extent {
        return vec![0];
    }
    let stride = (patch / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + patch < extent).collect();
    starts.push(extent - patch);
    starts.dedup();
    starts
}

fn crop(image: &Tensor<f32>, corner: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let s = image.shape();
    let (c, vs) = (s[0], [s[1], s[2], s[3]]);
    let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let row = ((ch * vs[0] + z + corner[0]) * vs[1] + y + corner[1]) * vs[2] + corner[2];
                out.extend_from_slice(&image.data()[row..row + size[2]]);
            }
        }
    }
    Tensor::from_parts(vec![1, c, size[0], size[1], size[2]], out)
}

fn accumulate(sum: &mut [f32], tile: &Tensor<f32>, corner: [usize; 3], vs: [usize; 3]) {
    let ts = tile.shape();
    let (k, size) = (ts[1], [ts[2], ts[3], ts[4]]);
    let mut i = 0;
    for ch in 0..k {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let row = ((ch * vs[0] + z + corner[0]) * vs[1] + y + corner[1]) * vs[2] + corner[2];
                for x in 0..size[2] {
                    sum[row + x] += tile.data()[i];
                    i += 1;
                }
            }
        }
    }
}

/// Sliding-window inference averaging overlapping logits.
pub fn predict_volume(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor<f32>,
    patch: [usize; 3],
) -> Result<VolumePrediction> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::validation(format!("image must be [C, S, H, W], got {s:?}")));
    }
    let vs = [s[1], s[2], s[3]];
    let size = [0, 1, 2].map(|k| patch[k].min(vs[k]));
    let starts = [0, 1, 2].map(|k| tile_starts(vs[k], size[k]));
    let plane: usize = vs.iter().product();
    let k_seg = config.mode.seg_channels();
    let k_res = config.mode.res_channels();
    let n_res = if config.variant.has_residual() { 3 } else { 0 };
    let mut seg_sum = vec![0.0f32; k_seg * plane];
    let mut res_sum = vec![vec![0.0f32; k_res * plane]; n_res];
    let mut counts = vec![0u32; plane];
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let corner = [z, y, x];
                let out = predict(params, config, &crop(image, corner, size))?;
                accumulate(&mut seg_sum, &out.seg_logits, corner, vs);
                for (sum, logits) in res_sum.iter_mut().zip(&out.res_logits) {
                    accumulate(sum, logits, corner, vs);
                }
                let ones = Tensor::full(vec![1, 1, size[0], size[1], size[2]], 1.0f32);
                let mut c = vec![0.0f32; plane];
                accumulate(&mut c, &ones, corner, vs);
                for (n, v) in counts.iter_mut().zip(c) {
                    *n += v as u32;
                }
            }
        }
    }
    let average = |sum: Vec<f32>| -> Vec<f32> {
        sum.iter().enumerate().map(|(i, &v)| v / counts[i % plane] as f32).collect()
    };
    let seg_logits = Tensor::from_parts(vec![k_seg, vs[0], vs[1], vs[2]], average(seg_sum));
    let seg = match config.mode {
        OutputMode::Binary { .. } => seg_logits.map(sigmoid),
        OutputMode::Multiclass { .. } => channel_softmax(&seg_logits),
    };
    let res = res_sum
        .into_iter()
        .map(|s| Tensor::from_parts(vec![k_res, vs[0], vs[1], vs[2]], average(s)).map(sigmoid))
        .collect();
    Ok(VolumePrediction { seg_logits, seg, res })
}

fn channel_softmax(logits: &Tensor<f32>) -> Tensor<f32> {
    let k = logits.shape()[0];
    let plane = logits.numel() / k;
    let d = logits.data();
    let mut out = vec![0.0f32; d.len()];
    for v in 0..plane {
        let max = (0..k).map(|c| d[c * plane + v]).fold(f32::NEG_INFINITY, f32::max);
        let total: f32 = (0..k).map(|c| (d[c * plane + v] - max).exp()).sum();
        for c in 0..k {
            out[c * plane + v] = (d[c * plane + v] - max).exp() / total;
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Foreground masks per target (binary) or per class 1..=C (multiclass) from `[K, S, H, W]` probabilities.
pub fn predicted_masks(mode: OutputMode, probs: &Tensor<f32>, threshold: f64) -> Result<Vec<BinaryMask>> {
    let s = probs.shape();
    let shape = [s[1], s[2], s[3]];
    let plane: usize = shape.iter().product();
    match mode {
        OutputMode::Binary { targets } => (0..targets)
            .map(|k| BinaryMask::threshold(shape, &probs.data()[k * plane..(k + 1) * plane], threshold))
            .collect(),
        OutputMode::Multiclass { classes } => {
            let d = probs.data();
            let argmax: Vec<usize> = (0..plane)
                .map(|v| {
                    (0..=classes)
                        .max_by(|&a, &b| d[a * plane + v].total_cmp(&d[b * plane + v]).then(b.cmp(&a)))
                        .expect("at least two channels")
                })
                .collect();
            Ok((1..=classes)
                .map(|c| BinaryMask::from_fn(shape, |z, y, x| argmax[(z * shape[1] + y) * shape[2] + x] == c))
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    /// Per foreground class or target.
    pub dice: Vec<f64>,
    /// `None` where the distance is undefined (an empty mask).
    pub hd: Vec<Option<f64>>,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_dice: f64,
    pub max_dice: f64,
    pub min_dice: f64,
    /// Mean over defined distances only.
    pub mean_hd: Option<f64>,
    pub hd_undefined: usize,
}

/// Dice and Hausdorff of predicted against reference masks.
pub fn score_masks(id: &str, pred: &[BinaryMask], target: &[BinaryMask], spacing: [f64; 3], eps: f64) -> Result<SampleMetrics> {
    if pred.len() != target.len() {
        return Err(Error::validation(format!(
            "{} predicted masks for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut dice = Vec::with_capacity(pred.len());
    let mut hd = Vec::with_capacity(pred.len());
    for (p, y) in pred.iter().zip(target) {
        dice.push(dice_score(p, y, eps)?);
        hd.push(match hausdorff_distance_edt(p, y, spacing) {
            Ok(d) => Some(d),
            Err(Error::UndefinedHausdorff(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let mean_dice = dice.iter().sum::<f64>() / dice.len().max(1) as f64;
    Ok(SampleMetrics {
        id: id.to_string(),
        dice,
        hd,
        mean_dice,
    })
}

pub fn summarize(samples: Vec<SampleMetrics>) -> EvalReport {
    let n = samples.len().max(1) as f64;
    let mean_dice = samples.iter().map(|s| s.mean_dice).sum::<f64>() / n;
    let max_dice = samples.iter().map(|s| s.mean_dice).fold(f64::NEG_INFINITY, f64::max);
    let min_dice = samples.iter().map(|s| s.mean_dice).fold(f64::INFINITY, f64::min);
    let defined: Vec<f64> = samples.iter().flat_map(|s| s.hd.iter().flatten().copied()).collect();
    let hd_undefined = samples.iter().map(|s| s.hd.iter().filter(|h| h.is_none()).count()).sum();
    EvalReport {
        samples,
        mean_dice,
        max_dice,
        min_dice,
        mean_hd: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        hd_undefined,
    }
}

/// Reference masks the metrics compare against: label `>= k` per binary target, or each class.
pub fn reference_masks(sample: &VolumeSample, config: &ModelConfig) -> Result<Vec<BinaryMask>> {
    let (seg, _) = sample_targets(sample, config)?;
    Ok(match config.mode {
        OutputMode::Binary { .. } => seg,
        OutputMode::Multiclass { .. } => seg.into_iter().skip(1).collect(),
    })
}

/// Per-sample and summary metrics; samples are scored in parallel, results keep dataset order.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, dataset: &[VolumeSample], eval: &EvalConfig) -> Result<EvalReport> {
    let samples = dataset
        .par_iter()
        .map(|sample| {
            let pred = predict_volume(params, config, &sample.image, eval.patch)?;
            let masks = predicted_masks(config.mode, &pred.seg, eval.threshold)?;
            score_masks(&sample.id, &masks, &reference_masks(sample, config)?, sample.spacing, eval.dice_eps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(samples))
}

/// Whole-volume training objective, averaged over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VolumeLosses {
    pub seg: f64,
    /// Zero for the baseline, matching the training log.
    pub res: f64,
    pub total: f64,
}

/// The training loss evaluated on a whole-volume prediction.
pub fn prediction_losses(pred: &VolumePrediction, sample: &VolumeSample, config: &ModelConfig, loss: &LossConfig) -> Result<VolumeLosses> {
    let batch = make_batch(std::slice::from_ref(sample), config)?.cast::<f64>();
    let lift = |t: &Tensor<f32>| -> Result<Tensor<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.cast::<f64>().reshape(shape)
    };
    let mut g = Graph::<f64>::new();
    let seg = g.constant(lift(&pred.seg)?);
    let res = pred
        .res
        .iter()
        .map(|r| Ok(g.constant(lift(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let vars = record_loss(&mut g, seg, &res, &batch, loss)?;
    Ok(VolumeLosses {
        seg: g.value(vars.seg).item(),
        res: vars.res.map_or(0.0, |r| g.value(r).item()),
        total: g.value(vars.total).item(),
    })
}

/// [`evaluate`] plus the mean whole-volume loss.
pub fn evaluate_with_losses(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &[VolumeSample],
    eval: &EvalConfig,
    loss: &LossConfig,
) -> Result<(EvalReport, VolumeLosses)> {
    let scored = dataset
        .par_iter()
        .map(|sample| {
            let pred = predict_volume(params, config, &sample.image, eval.patch)?;
            let masks = predicted_masks(config.mode, &pred.seg, eval.threshold)?;
            let metrics = score_masks(&sample.id, &masks, &reference_masks(sample, config)?, sample.spacing, eval.dice_eps)?;
            Ok((metrics, prediction_losses(&pred, sample, config, loss)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scored.len().max(1) as f64;
    let mut mean = VolumeLosses::default();
    for (_, l) in &scored {
        mean.seg += l.seg / n;
        mean.res += l.res / n;
        mean.total += l.total / n;
    }
    Ok((summarize(scored.into_iter().map(|(m, _)| m).collect()), mean))
}
