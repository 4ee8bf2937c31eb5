//! Segmentation and residual losses built on the autodiff graph.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[BCE_FLOOR, 1 - BCE_FLOOR]` inside BCE only.
pub const BCE_FLOOR: f64 = 1e-7;
pub const DEFAULT_DICE_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// How the BCE sum is reduced over voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub dice_eps: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            dice_eps: DEFAULT_DICE_EPS,
            reduction: Reduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.dice_eps > 0.0 && self.dice_eps.is_finite()) {
            return Err(Error::config(format!("dice eps must be > 0, got {}", self.dice_eps)));
        }
        Ok(())
    }
}

thread_local! {
    static RES_LOSS_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of residual-loss evaluations made on this thread so far.
pub fn residual_loss_evaluations() -> usize {
    RES_LOSS_CALLS.with(Cell::get)
}

/// Number of independent Dice blocks: every axis before the trailing `[S, H, W]`.
fn dice_blocks(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(3)].iter().product()
}

fn check_probabilities<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|&&v| !(v.to_f64() >= 0.0 && v.to_f64() <= 1.0)) {
        return Err(Error::validation(format!(
            "{what} holds {} outside [0, 1]",
            Scalar::to_f64(*bad)
        )));
    }
    Ok(())
}

fn check_binary<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|v| {
        let v = Scalar::to_f64(**v);
        v != 0.0 && v != 1.0
    }) {
        return Err(Error::validation(format!("target holds non-binary value {}", Scalar::to_f64(*bad))));
    }
    Ok(())
}

/// BCE minus soft Dice: `Σ BCE(p, y) - Σ_blocks 2Σpy / (Σ(p+y) + eps)`.
///
/// Dice is taken per leading block (each `(n, c)` pair for `[N, C, S, H, W]`).
pub fn seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    eps: f64,
    reduction: Reduction,
) -> Result<Var> {
    check_probabilities(g.value(pred), "segmentation prediction")?;
    let ones = Tensor::full(target.shape().to_vec(), T::one());
    let mut bce = g.weighted_bce_sum(pred, target, &ones, BCE_FLOOR)?;
    if reduction == Reduction::Mean {
        bce = g.mul_scalar(bce, 1.0 / target.numel() as f64);
    }
    let dice = g.soft_dice_sum(pred, target, eps, dice_blocks(target.shape()))?;
    g.sub(bce, dice)
}

/// `(w_0, w_1)` with `w_k = ln(V / max(V_k, 1))` over a binary block.
pub fn class_weights<T: Scalar>(target: &[T]) -> (f64, f64) {
    let v = target.len() as f64;
    let v1 = target.iter().filter(|&&t| t == T::one()).count() as f64;
    let v0 = v - v1;
    ((v / v0.max(1.0)).ln(), (v / v1.max(1.0)).ln())
}

/// Per-voxel weight map: each block gets its own class weights.
pub fn residual_weight_map<T: Scalar>(target: &Tensor<T>) -> Tensor<T> {
    let blocks = dice_blocks(target.shape()).max(1);
    let per = target.numel() / blocks;
    let mut data = Vec::with_capacity(target.numel());
    for block in target.data().chunks(per) {
        let (w0, w1) = class_weights(block);
        let (w0, w1) = (T::from_f64(w0), T::from_f64(w1));
        data.extend(block.iter().map(|&y| if y == T::one() { w1 } else { w0 }));
    }
    Tensor::from_parts(target.shape().to_vec(), data)
}

/// Class-weighted BCE for one residual prediction level.
pub fn res_loss_level<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    reduction: Reduction,
) -> Result<Var> {
    let weights = residual_weight_map(target);
    res_loss_level_with_weights(g, pred, target, &weights, reduction)
}

/// Residual BCE with an explicit per-voxel weight map.
pub fn res_loss_level_with_weights<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    weights: &Tensor<T>,
    reduction: Reduction,
) -> Result<Var> {
    RES_LOSS_CALLS.with(|c| c.set(c.get() + 1));
    check_probabilities(g.value(pred), "residual prediction")?;
    check_binary(target)?;
    let loss = g.weighted_bce_sum(pred, target, weights, BCE_FLOOR)?;
    Ok(match reduction {
        Reduction::Sum => loss,
        Reduction::Mean => g.mul_scalar(loss, 1.0 / target.numel() as f64),
    })
}

/// `L0 + λ (L1 + L2)`.
pub fn res_loss_total<T: Scalar>(g: &mut Graph<T>, levels: [Var; 3], lambda: f64) -> Result<Var> {
    let front = g.add(levels[1], levels[2])?;
    let front = g.mul_scalar(front, lambda);
    g.add(levels[0], front)
}
