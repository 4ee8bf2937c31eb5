use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel standardisation of a `[C, ...]` image to mean 0, population std 1.
///
/// Channels with zero variance are only mean-centred.
pub fn zscore_normalize(image: &Tensor<f32>) -> Tensor<f32> {
    let c = image.shape()[0];
    let per = image.numel() / c;
    let mut out = Vec::with_capacity(image.numel());
    for chunk in image.data().chunks(per) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        out.extend(chunk.iter().map(|&v| ((v as f64 - mean) * scale) as f32));
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

/// Clamps to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn truncate_intensity(image: &Tensor<f32>, lo: f64, hi: f64) -> Result<Tensor<f32>> {
    if !(lo < hi) {
        return Err(Error::config(format!("truncation window needs lo < hi, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    Ok(image.map(|v| ((v as f64).clamp(lo, hi) - lo) as f32 / span as f32))
}
