//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] owns every intermediate value. Operations append a node whose
//! inputs are already on the tape, so node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::sync::OnceLock;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use crate::kernels::norm::{
    group_norm_backward, group_norm_forward, weight_standardize_backward,
    weight_standardize_forward, GroupStats,
};
use crate::kernels::slice_diff::{abs_diff_backward, abs_diff_forward};
use crate::kernels::upsample::{upsample_backward, upsample_forward};
use crate::tensor::{Scalar, Tensor};

/// Environment variable that turns on NaN/Inf assertions after every op.
pub const CHECK_FINITE_ENV: &str = "CONRES_CHECK_FINITE";

fn check_finite_default() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var(CHECK_FINITE_ENV)
            .map(|v| !v.is_empty() && v != "0")
            .unwrap_or(false)
    })
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Upsample {
        x: Var,
        scale: [usize; 3],
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    WeightStd {
        w: Var,
        rstd: Vec<T>,
    },
    AbsDiff {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sum(Var),
    Mean(Var),
    Ln(Var),
    WeightedBce {
        pred: Var,
        target: Vec<T>,
        weight: Vec<T>,
        floor: T,
    },
    SoftDice {
        pred: Var,
        target: Vec<T>,
        eps: T,
        chunks: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv3d",
            Op::Upsample { .. } => "upsample_trilinear",
            Op::GroupNorm { .. } => "group_norm",
            Op::WeightStd { .. } => "weight_standardize",
            Op::AbsDiff { .. } => "slicewise_abs_diff",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Ln(_) => "ln",
            Op::WeightedBce { .. } => "weighted_bce",
            Op::SoftDice { .. } => "soft_dice",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            check_finite: check_finite_default(),
        }
    }

    /// Enables (or disables) NaN/Inf assertions on every forward value.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.check_finite {
            assert!(
                value.is_finite(),
                "non-finite value produced by {} at node {}",
                op.name(),
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name, v);
        Ok(v)
    }

    pub fn params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        spec.check_shapes(xv.shape(), wv.shape(), b.map(|b| self.shape(b)))?;
        let (shape, data) = conv3d_forward(
            &spec,
            xv.shape(),
            xv.data(),
            wv.data(),
            b.map(|b| self.value(b).data()),
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Conv { x, w, b, spec }, rg))
    }

    pub fn upsample_trilinear(&mut self, x: Var, scale: [usize; 3]) -> Result<Var> {
        let xv = self.value(x);
        let (shape, data) = upsample_forward(xv.shape(), xv.data(), scale)?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Upsample { x, scale }, rg))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (data, stats) = group_norm_forward(
            xv.shape(),
            xv.data(),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(eps),
        )?;
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn weight_standardize(&mut self, w: Var, eps: f64) -> Result<Var> {
        let wv = self.value(w);
        let (data, rstd) = weight_standardize_forward(wv.shape(), wv.data(), T::from_f64(eps))?;
        let value = Tensor::from_parts(wv.shape().to_vec(), data);
        let rg = self.rg(w);
        Ok(self.push(value, Op::WeightStd { w, rstd }, rg))
    }

    /// Adjacent-slice absolute difference along tensor dimension `axis`.
    pub fn slicewise_abs_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let data = abs_diff_forward(xv.shape(), xv.data(), axis)?;
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::AbsDiff { x, axis }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        self.push(value, Op::Ln(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::config(format!(
                "softmax axis {axis} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |c: usize| o * n * inner + c * inner + j;
                let max = (0..n).map(|c| src[at(c)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for c in 0..n {
                    let e = (src[at(c)] - max).exp();
                    out[at(c)] = e;
                    total = total + e;
                }
                for c in 0..n {
                    out[at(c)] = out[at(c)] / total;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::MulScalar(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// `sum_i weight_i * bce(clamp(pred_i, floor, 1 - floor), target_i)`.
    ///
    /// Gradient is zero where the clamp is active.
    pub fn weighted_bce_sum(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        weight: &Tensor<T>,
        floor: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_same_shape(target)?;
        pv.expect_same_shape(weight)?;
        let floor = T::from_f64(floor);
        let hi = T::one() - floor;
        let total = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&p, &y), &w)| {
                let p = p.max(floor).min(hi);
                -w * (y * p.ln() + (T::one() - y) * (T::one() - p).ln())
            })
            .sum::<T>();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedBce {
                pred,
                target: target.data().to_vec(),
                weight: weight.data().to_vec(),
                floor,
            },
            rg,
        ))
    }

    /// `sum_k 2 * sum(p*y) / (sum(p + y) + eps)` over `chunks` equal
    /// contiguous blocks (one per sample/channel pair).
    pub fn soft_dice_sum(&mut self, pred: Var, target: &Tensor<T>, eps: f64, chunks: usize) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_same_shape(target)?;
        if chunks == 0 || pv.numel() % chunks != 0 {
            return Err(Error::config(format!(
                "cannot split {} elements into {chunks} dice blocks",
                pv.numel()
            )));
        }
        let eps = T::from_f64(eps);
        let per = pv.numel() / chunks;
        let two = T::from_f64(2.0);
        let total = pv
            .data()
            .chunks(per)
            .zip(target.data().chunks(per))
            .map(|(p, y)| {
                let (inter, union) = dice_sums(p, y);
                two * inter / (union + eps)
            })
            .sum::<T>();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftDice {
                pred,
                target: target.data().to_vec(),
                eps,
                chunks,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let out = conv3d_backward(
                    spec,
                    xv.shape(),
                    xv.data(),
                    wv.data(),
                    gd,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(d) = out.input {
                    self.acc(grads, *x, d);
                }
                if let Some(d) = out.weight {
                    self.acc(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, out.bias) {
                    self.acc(grads, *b, d);
                }
            }
            Op::Upsample { x, scale } => {
                let d = upsample_backward(self.shape(*x), gd, *scale);
                self.acc(grads, *x, d);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xv = self.value(*x);
                let out = group_norm_backward(
                    xv.shape(),
                    xv.data(),
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                    gd,
                );
                self.acc(grads, *x, out.input);
                self.acc(grads, *gamma, out.gamma);
                self.acc(grads, *beta, out.beta);
            }
            Op::WeightStd { w, rstd } => {
                let d = weight_standardize_backward(y, rstd, gd);
                self.acc(grads, *w, d);
            }
            Op::AbsDiff { x, axis } => {
                let xv = self.value(*x);
                let d = abs_diff_backward(xv.shape(), xv.data(), *axis, gd);
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = y
                    .iter()
                    .zip(gd)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let d = xv.iter().zip(gd).map(|(&v, &g)| g / v).collect();
                self.acc(grads, *x, d);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |c: usize| o * n * inner + c * inner + j;
                        let dot = (0..n).map(|c| y[at(c)] * gd[at(c)]).sum::<T>();
                        for c in 0..n {
                            d[at(c)] = y[at(c)] * (gd[at(c)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.acc(grads, *a, gd.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, gd.iter().zip(av).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.acc(grads, *a, gd.iter().zip(bv).map(|(&g, &v)| g / v).collect());
                }
                if self.rg(*b) {
                    let d = gd
                        .iter()
                        .zip(av)
                        .zip(bv)
                        .map(|((&g, &u), &v)| -g * u / (v * v))
                        .collect();
                    self.acc(grads, *b, d);
                }
            }
            Op::AddScalar(x) => self.acc(grads, *x, gd.to_vec()),
            Op::MulScalar(x, c) => self.acc(grads, *x, gd.iter().map(|&v| v * *c).collect()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = gd[0] / T::from_f64(n as f64);
                self.acc(grads, *x, vec![v; n]);
            }
            Op::WeightedBce {
                pred,
                target,
                weight,
                floor,
            } => {
                let p = self.value(*pred).data();
                let hi = T::one() - *floor;
                let d = p
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&p, &t), &w)| {
                        if p > *floor && p < hi {
                            gd[0] * w * (p - t) / (p * (T::one() - p))
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *pred, d);
            }
            Op::SoftDice {
                pred,
                target,
                eps,
                chunks,
            } => {
                let p = self.value(*pred).data();
                let per = p.len() / chunks;
                let two = T::from_f64(2.0);
                let mut d = Vec::with_capacity(p.len());
                for (pc, yc) in p.chunks(per).zip(target.chunks(per)) {
                    let (inter, union) = dice_sums(pc, yc);
                    let u = union + *eps;
                    for &t in yc {
                        d.push(gd[0] * two * (t * u - inter) / (u * u));
                    }
                }
                self.acc(grads, *pred, d);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d) {
                    *e = *e + x;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), d));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when unreachable.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }

    /// Named parameter gradients in registration order; unreachable
    /// parameters get zeros of the parameter's shape.
    pub fn params(&self, graph: &Graph<T>) -> IndexMap<String, Tensor<T>> {
        graph
            .params()
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(graph, v)))
            .collect()
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn dice_sums<T: Scalar>(p: &[T], y: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut union = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        inter = inter + a * b;
        union = union + a + b;
    }
    (inter, union)
}
