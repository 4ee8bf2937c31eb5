//! Self-check suites with machine-readable pass/fail reports.
//!
//! * `gradcheck`: finite-difference checks of every differentiable op, the
//!   losses, and one end-to-end model.
//! * `oracle`: metrics and residual masks against brute-force references.
//! * `ablation`: the variant ordering on a fixed phantom split.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::data::{generate_phantom, zscore_normalize, ObjectFamily, PhantomSpec, VolumeSample};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, min_adjacent_gap, random_tensor, resample_until, GradCheckOptions};
use crate::kernels::conv::ConvSpec;
use crate::losses::{res_loss_level, res_loss_level_with_weights, res_loss_total, seg_loss, Reduction};
use crate::masks::{
    compute_residual_mask, compute_residual_mask_multiclass, reconstruct_from_residual, BinaryMask, LabelVolume,
    ResidualAxis,
};
use crate::metrics::{dice_score, hausdorff_distance, hausdorff_distance_edt};
use crate::model::{build_model, forward, ModelConfig, Variant};
use crate::oracles;
use crate::tensor::Tensor;
use crate::train::{make_batch, record_loss, train_and_evaluate, AblationConfig, AblationReport, AblationRun, EvalConfig, TrainConfig, ORDERING_TOLERANCE};

/// Per-op finite-difference tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Keeps kinked inputs (relu, abs) this far from the kink.
pub const KINK_MARGIN: f64 = 1e-2;
pub const ORACLE_INSTANCES: usize = 100;
pub const RECONSTRUCTION_INSTANCES: usize = 500;
/// Largest allowed spread of pooled Dice across residual axes.
pub const VIEW_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracle,
    Ablation,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Oracle => "oracle",
            Suite::Ablation => "ablation",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "oracle" => Ok(Suite::Oracle),
            "ablation" => Ok(Suite::Ablation),
            _ => Err(Error::Usage(format!("unknown suite `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured quantity: max relative error, mismatch count, Dice, ...
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), passed: value <= tolerance, value, tolerance }
    }

    /// Passes when `value >= tolerance`.
    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), passed: value >= tolerance, value, tolerance }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationReport>,
}

impl VerifyReport {
    pub fn new(suite: Suite, checks: Vec<Check>) -> Self {
        Self {
            suite: suite.to_string(),
            passed: checks.iter().all(|c| c.passed),
            checks,
            ablation: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// ---------------------------------------------------------------- gradcheck

type Program = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn weighted_sum(g: &mut Graph<f64>, x: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(r.clone());
    let p = g.mul(x, c)?;
    Ok(g.sum(p))
}

/// Contracts the op output with a fixed random tensor so every output
/// coordinate carries a distinct upstream gradient.
fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape, -1.0, 1.0)
}

fn op_check(name: &str, program: Program, inputs: &[(&str, Tensor<f64>)], tol: f64, opts: Option<GradCheckOptions>) -> Result<Check> {
    let opts = opts.unwrap_or_else(|| GradCheckOptions::new(tol));
    let report = grad_check(program, inputs, &opts)?;
    Ok(Check::at_most(name, report.max_rel_error, tol))
}

/// Values at least `KINK_MARGIN` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(KINK_MARGIN * 2.0..2.0);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
}

/// Random walk along `axis` whose steps stay clear of zero, so no
/// `|x[s] - x[s-1]|` sits on the abs kink.
fn separated_along(rng: &mut ChaCha8Rng, shape: &[usize], axis: usize) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape, -1.0, 1.0);
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let d = t.data_mut();
    for o in 0..outer {
        for s in 1..n {
            for j in 0..inner {
                let cur = (o * n + s) * inner + j;
                let step = rng.random_range(0.15..0.6);
                d[cur] = d[cur - inner] + if rng.random_bool(0.5) { step } else { -step };
            }
        }
    }
    t
}

fn binary_tensor(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

fn gradcheck_ops(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let convs: [(&str, [usize; 5], ConvSpec); 4] = [
        ("conv3d/3x3x3", [1, 3, 5, 6, 7], ConvSpec::cubic(3, 2, 3)),
        ("conv3d/stride2", [1, 2, 6, 8, 8], ConvSpec::cubic(2, 3, 3).with_stride(2)),
        ("conv3d/dilation2", [1, 2, 6, 7, 8], ConvSpec::cubic(2, 2, 3).with_dilation(2)),
        ("conv3d/1x1x1", [1, 4, 3, 4, 5], ConvSpec::cubic(4, 3, 1)),
    ];
    for (name, xs, spec) in convs {
        let x = random_tensor(rng, &xs, -1.0, 1.0);
        let w = random_tensor(rng, &spec.weight_shape(), -0.5, 0.5);
        let b = random_tensor(rng, &[spec.out_channels], -0.5, 0.5);
        let out = spec.output_extents([xs[2], xs[3], xs[4]])?;
        let r = probe(rng, &[1, spec.out_channels, out[0], out[1], out[2]]);
        let program: Program = Box::new(move |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), spec)?;
            weighted_sum(g, y, &r)
        });
        checks.push(op_check(name, program, &[("x", x), ("w", w), ("b", b)], OP_TOLERANCE, None)?);
    }

    for (name, xs, scale) in [
        ("upsample_trilinear/2x2x2", [1, 2, 3, 4, 4], [2usize, 2, 2]),
        ("upsample_trilinear/1x2x4", [1, 3, 3, 4, 2], [1, 2, 4]),
    ] {
        let x = random_tensor(rng, &xs, -1.0, 1.0);
        let r = probe(rng, &[1, xs[1], xs[2] * scale[0], xs[3] * scale[1], xs[4] * scale[2]]);
        let program: Program = Box::new(move |g, v| {
            let y = g.upsample_trilinear(v[0], scale)?;
            weighted_sum(g, y, &r)
        });
        checks.push(op_check(name, program, &[("x", x)], OP_TOLERANCE, None)?);
    }

    for (name, xs, groups) in [("group_norm/g2", [1, 4, 6, 8, 8], 2usize), ("group_norm/g4", [2, 4, 3, 4, 4], 4)] {
        let x = random_tensor(rng, &xs, -2.0, 2.0);
        let gamma = random_tensor(rng, &[xs[1]], 0.5, 1.5);
        let beta = random_tensor(rng, &[xs[1]], -0.5, 0.5);
        let r = probe(rng, &xs);
        let program: Program = Box::new(move |g, v| {
            let y = g.group_norm(v[0], groups, v[1], v[2], 1e-5)?;
            weighted_sum(g, y, &r)
        });
        checks.push(op_check(name, program, &[("x", x), ("gamma", gamma), ("beta", beta)], OP_TOLERANCE, None)?);
    }

    {
        let w = random_tensor(rng, &[3, 2, 3, 3, 3], -1.0, 1.0);
        let r = probe(rng, &[3, 2, 3, 3, 3]);
        let program: Program = Box::new(move |g, v| {
            let y = g.weight_standardize(v[0], 1e-5)?;
            weighted_sum(g, y, &r)
        });
        checks.push(op_check("weight_standardize", program, &[("w", w)], OP_TOLERANCE, None)?);
    }

    for axis in ResidualAxis::ALL {
        let shape = [1, 2, 6, 5, 4];
        let dim = axis.dim_of(5);
        let x = resample_until(rng, 16, |r| separated_along(r, &shape, dim), |t| min_adjacent_gap(t, dim) > 0.1)?;
        let r = probe(rng, &shape);
        let program: Program = Box::new(move |g, v| {
            let y = g.slicewise_abs_diff(v[0], dim)?;
            weighted_sum(g, y, &r)
        });
        checks.push(op_check(&format!("slicewise_abs_diff/{axis}"), program, &[("x", x)], OP_TOLERANCE, None)?);
    }

    let act_shape = [1, 3, 4, 5, 6];
    {
        let x = random_tensor(rng, &act_shape, -4.0, 4.0);
        let r = probe(rng, &act_shape);
        let program: Program = Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, &r)
        });
        checks.push(op_check("sigmoid", program, &[("x", x)], OP_TOLERANCE, None)?);
    }
    {
        let x = away_from_zero(rng, &act_shape);
        let r = probe(rng, &act_shape);
        let program: Program = Box::new(move |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, &r)
        });
        checks.push(op_check("relu", program, &[("x", x)], OP_TOLERANCE, None)?);
    }
    {
        let x = random_tensor(rng, &act_shape, -3.0, 3.0);
        let r = probe(rng, &act_shape);
        let program: Program = Box::new(move |g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, &r)
        });
        checks.push(op_check("softmax", program, &[("x", x)], OP_TOLERANCE, None)?);
    }
    {
        let x = random_tensor(rng, &act_shape, 0.5, 3.0);
        let r = probe(rng, &act_shape);
        let program: Program = Box::new(move |g, v| {
            let y = g.ln(v[0]);
            weighted_sum(g, y, &r)
        });
        checks.push(op_check("ln", program, &[("x", x)], OP_TOLERANCE, None)?);
    }
    {
        let a = random_tensor(rng, &act_shape, -2.0, 2.0);
        let b = random_tensor(rng, &act_shape, 0.5, 2.0);
        let r = probe(rng, &act_shape);
        let program: Program = Box::new(move |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let q = g.div(m, v[1])?;
            let q = g.div(q, v[1])?;
            let q = g.add_scalar(q, 0.3);
            let q = g.mul_scalar(q, -1.7);
            let mean = g.mean(q);
            let total = weighted_sum(g, q, &r)?;
            g.add(total, mean)
        });
        checks.push(op_check("elementwise", program, &[("a", a), ("b", b)], OP_TOLERANCE, None)?);
    }
    {
        let shape = [1, 4, 4, 6, 6];
        let spec = ConvSpec::cubic(4, 4, 3);
        let x = random_tensor(rng, &shape, -1.0, 1.0);
        let w = random_tensor(rng, &spec.weight_shape(), -0.5, 0.5);
        let gamma = random_tensor(rng, &[4], 0.5, 1.5);
        let beta = random_tensor(rng, &[4], -0.5, 0.5);
        let r = probe(rng, &shape);
        let program: Program = Box::new(move |g, v| {
            let ws = g.weight_standardize(v[1], 1e-5)?;
            let y = g.conv3d(v[0], ws, None, spec)?;
            let y = g.group_norm(y, 2, v[2], v[3], 1e-5)?;
            let y = g.sigmoid(y);
            weighted_sum(g, y, &r)
        });
        checks.push(op_check(
            "chain/conv_gn_sigmoid",
            program,
            &[("x", x), ("w", w), ("gamma", gamma), ("beta", beta)],
            OP_TOLERANCE,
            None,
        )?);
    }
    checks.extend(gradcheck_losses(rng)?);
    Ok(checks)
}

fn gradcheck_losses(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let shape = [1, 2, 4, 5, 6];
    for reduction in [Reduction::Sum, Reduction::Mean] {
        let z = random_tensor(rng, &shape, -3.0, 3.0);
        let y = binary_tensor(rng, &shape, 0.4);
        let program: Program = Box::new(move |g, v| {
            let p = g.sigmoid(v[0]);
            seg_loss(g, p, &y, 1e-5, reduction)
        });
        let name = format!("seg_loss/{}", if reduction == Reduction::Sum { "sum" } else { "mean" });
        checks.push(op_check(&name, program, &[("z", z)], OP_TOLERANCE, None)?);
    }
    {
        let z = random_tensor(rng, &shape, -3.0, 3.0);
        let y = binary_tensor(rng, &shape, 0.2);
        let program: Program = Box::new(move |g, v| {
            let p = g.sigmoid(v[0]);
            res_loss_level(g, p, &y, Reduction::Sum)
        });
        checks.push(op_check("res_loss_level", program, &[("z", z)], OP_TOLERANCE, None)?);
    }
    {
        let z = random_tensor(rng, &shape, -3.0, 3.0);
        let y = binary_tensor(rng, &shape, 0.3);
        let w = random_tensor(rng, &shape, 0.1, 3.0);
        let program: Program = Box::new(move |g, v| {
            let p = g.sigmoid(v[0]);
            res_loss_level_with_weights(g, p, &y, &w, Reduction::Sum)
        });
        checks.push(op_check("res_loss_level/weighted", program, &[("z", z)], OP_TOLERANCE, None)?);
    }
    {
        let zs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(rng, &shape, -3.0, 3.0)).collect();
        let ys: Vec<Tensor<f64>> = (0..3).map(|_| binary_tensor(rng, &shape, 0.25)).collect();
        let program: Program = Box::new(move |g, v| {
            let mut levels = [v[0]; 3];
            for (k, level) in levels.iter_mut().enumerate() {
                let p = g.sigmoid(v[k]);
                *level = res_loss_level(g, p, &ys[k], Reduction::Sum)?;
            }
            res_loss_total(g, levels, 0.5)
        });
        checks.push(op_check(
            "res_loss_total",
            program,
            &[("z0", zs[0].clone()), ("z1", zs[1].clone()), ("z2", zs[2].clone())],
            OP_TOLERANCE,
            None,
        )?);
    }
    Ok(checks)
}

/// Full-variant model on a `[1, 1, 8, 8, 8]` phantom crop, every parameter
/// tensor sampled at `coords_per_tensor` coordinates.
pub fn gradcheck_model(seed: u64, coords_per_tensor: usize) -> Result<Check> {
    let config = ModelConfig { variant: Variant::Full, ..Default::default() };
    let params = build_model(&config, seed)?;
    let sample = generate_phantom(&PhantomSpec {
        shape: [8, 8, 8],
        objects: (1, 1),
        family: ObjectFamily::Sphere,
        radius: (2.0, 3.0),
        seed,
        ..Default::default()
    })?;
    let batch = make_batch(std::slice::from_ref(&sample), &config)?.cast::<f64>();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs: Vec<(&str, Tensor<f64>)> = params.iter().map(|(n, t)| (n.as_str(), t.cast())).collect();
    inputs.push(("input", batch.image.clone()));
    let loss_cfg = crate::train::LossConfig::default();
    let cfg = config.clone();
    let program = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let vars = names.iter().cloned().zip(v.iter().copied()).collect();
        let out = forward(g, &vars, &cfg, v[v.len() - 1])?;
        Ok(record_loss(g, out.seg, &out.res, &batch, &loss_cfg)?.total)
    };
    let opts = GradCheckOptions::new(MODEL_TOLERANCE).sampled(coords_per_tensor, seed);
    let report = grad_check(program, &inputs, &opts)?;
    Ok(Check::at_most("model/full_e2e", report.max_rel_error, MODEL_TOLERANCE))
}

pub fn run_gradcheck(seed: u64) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = gradcheck_ops(&mut rng)?;
    checks.push(gradcheck_model(seed, 2)?);
    Ok(VerifyReport::new(Suite::Gradcheck, checks))
}

// ------------------------------------------------------------------- oracle

fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> BinaryMask {
    let p = rng.random_range(0.05..0.6);
    BinaryMask::from_fn(shape, |_, _, _| rng.random_bool(p))
}

/// A random axis-aligned box, giving smooth surfaces next to the speckle masks.
fn random_box(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> BinaryMask {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for k in 0..3 {
        let a = rng.random_range(0..shape[k]);
        let b = rng.random_range(0..shape[k]);
        lo[k] = a.min(b);
        hi[k] = a.max(b);
    }
    BinaryMask::from_fn(shape, |s, h, w| {
        (lo[0]..=hi[0]).contains(&s) && (lo[1]..=hi[1]).contains(&h) && (lo[2]..=hi[2]).contains(&w)
    })
}

fn instance(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> BinaryMask {
    if rng.random_bool(0.5) { random_mask(rng, shape) } else { random_box(rng, shape) }
}

fn same_hd(ours: Result<f64>, oracle: Option<f64>) -> bool {
    match (ours, oracle) {
        (Ok(a), Some(b)) => a == b,
        (Err(Error::UndefinedHausdorff(_)), None) => true,
        _ => false,
    }
}

pub fn run_oracle(seed: u64) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [8, 8, 8];
    let (mut dice_bad, mut hd_bad, mut edt_bad, mut hd_aniso_bad, mut res_bad, mut multi_bad) = (0, 0, 0, 0, 0, 0);
    for i in 0..ORACLE_INSTANCES {
        let a = instance(&mut rng, shape);
        // Every tenth pair includes an empty mask to exercise the undefined path.
        let b = if i % 10 == 9 { BinaryMask::zeros(shape) } else { instance(&mut rng, shape) };
        let eps = 1e-5;
        if dice_score(&a, &b, eps)? != oracles::dice(&a, &b, eps) {
            dice_bad += 1;
        }
        let unit = [1.0; 3];
        let expect = oracles::hausdorff(&a, &b, unit);
        hd_bad += usize::from(!same_hd(hausdorff_distance(&a, &b, unit), expect));
        edt_bad += usize::from(!same_hd(hausdorff_distance_edt(&a, &b, unit), expect));
        let spacing = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
        hd_aniso_bad += usize::from(!same_hd(
            hausdorff_distance(&a, &b, spacing),
            oracles::hausdorff(&a, &b, spacing),
        ));
        for axis in ResidualAxis::ALL {
            if compute_residual_mask(&a, axis)? != oracles::residual_mask(&a, axis) {
                res_bad += 1;
            }
        }
        let classes = rng.random_range(1..=4usize);
        let labels: Vec<u8> = (0..512).map(|_| rng.random_range(0..=classes as u8)).collect();
        let label = LabelVolume::new(shape, labels, classes)?;
        let axis = ResidualAxis::ALL[i % 3];
        let ours = compute_residual_mask_multiclass(&label, axis)?;
        let expect: Vec<BinaryMask> = (1..=classes)
            .map(|c| oracles::residual_mask(&label.class_mask(c), axis))
            .collect();
        multi_bad += usize::from(ours != expect);
    }
    let mut recon_bad = 0;
    for i in 0..RECONSTRUCTION_INSTANCES {
        let m = instance(&mut rng, shape);
        let axis = ResidualAxis::ALL[i % 3];
        let residual = compute_residual_mask(&m, axis)?;
        if reconstruct_from_residual(&m.first_slice(axis), &residual, axis)? != m {
            recon_bad += 1;
        }
    }
    let mismatches = |name: &str, n: usize| Check::at_most(name, n as f64, 0.0);
    Ok(VerifyReport::new(
        Suite::Oracle,
        vec![
            mismatches("dice", dice_bad),
            mismatches("hausdorff/pairwise", hd_bad),
            mismatches("hausdorff/edt", edt_bad),
            mismatches("hausdorff/anisotropic", hd_aniso_bad),
            mismatches("residual_mask/binary", res_bad),
            mismatches("residual_mask/multiclass", multi_bad),
            mismatches("xor_reconstruction", recon_bad),
        ],
    ))
}

// ----------------------------------------------------------------- ablation

/// The fixed phantom split and training recipe used for variant and view comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetup {
    pub phantom: PhantomSpec,
    pub train_count: u64,
    pub test_count: u64,
    pub train_seed_base: u64,
    pub test_seed_base: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for AblationSetup {
    fn default() -> Self {
        let cube = [24, 24, 24];
        Self {
            // Ellipsoids are drawn with random but axis-agnostic radii, so no view is favoured.
            phantom: PhantomSpec {
                shape: cube,
                objects: (1, 3),
                family: ObjectFamily::Ellipsoid,
                radius: (2.5, 7.0),
                noise_std: 0.5,
                ..Default::default()
            },
            train_count: 24,
            test_count: 8,
            train_seed_base: 1000,
            test_seed_base: 2000,
            train: TrainConfig {
                iterations: 300,
                batch_size: 2,
                lr: 1e-3,
                patch: cube,
                ..Default::default()
            },
            eval: EvalConfig { patch: cube, ..Default::default() },
        }
    }
}

impl AblationSetup {
    fn generate(&self, base: u64, count: u64) -> Result<Vec<VolumeSample>> {
        (0..count)
            .map(|i| {
                let mut s = generate_phantom(&PhantomSpec { seed: base + i, ..self.phantom.clone() })?;
                s.image = zscore_normalize(&s.image);
                Ok(s)
            })
            .collect()
    }

    /// `(train, test)` phantoms, z-score normalized.
    pub fn datasets(&self) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
        Ok((
            self.generate(self.train_seed_base, self.train_count)?,
            self.generate(self.test_seed_base, self.test_count)?,
        ))
    }

    pub fn ablation_config(&self, seeds: &[u64]) -> AblationConfig {
        AblationConfig {
            base: self.train.clone(),
            seeds: seeds.to_vec(),
            variants: Variant::ALL.to_vec(),
            eval: self.eval,
        }
    }
}

/// Seeds needed for `full >= baseline`: two of three, scaled to other counts.
pub fn required_wins(seeds: usize) -> usize {
    (2 * seeds).div_ceil(3)
}

pub fn ablation_checks(report: &AblationReport, seeds: usize) -> Vec<Check> {
    let wins = report.full_ge_baseline_seeds.unwrap_or(0);
    let full = report.pooled_dice(Variant::Full).unwrap_or(f64::NAN);
    let res_only = report.pooled_dice(Variant::ResOnly).unwrap_or(f64::NAN);
    let baseline = report.pooled_dice(Variant::Baseline).unwrap_or(f64::NAN);
    let mut checks = vec![
        Check::at_least("full_ge_baseline_seeds", wins as f64, required_wins(seeds) as f64),
        Check::at_least("pooled/full_minus_res_only", full - res_only, 0.0),
        Check::at_least("pooled/res_only_minus_baseline", res_only - baseline, -ORDERING_TOLERANCE),
    ];
    for c in &mut checks {
        c.passed &= c.value.is_finite();
    }
    checks
}

pub fn run_ablation_suite(setup: &AblationSetup, seeds: &[u64]) -> Result<VerifyReport> {
    let (train_set, test_set) = setup.datasets()?;
    let report = crate::train::run_ablation(&setup.ablation_config(seeds), &train_set, &test_set)?;
    let mut out = VerifyReport::new(Suite::Ablation, ablation_checks(&report, seeds.len()));
    out.ablation = Some(report);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewRun {
    pub axis: ResidualAxis,
    pub seed: u64,
    pub mean_dice: f64,
}

/// Trains the full variant with residuals along `axis` for each seed.
pub fn view_runs(
    setup: &AblationSetup,
    train_set: &[VolumeSample],
    test_set: &[VolumeSample],
    axis: ResidualAxis,
    seeds: &[u64],
) -> Result<Vec<ViewRun>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut cfg = setup.train.clone();
            cfg.seed = seed;
            cfg.model.variant = Variant::Full;
            cfg.model.residual_axis = axis;
            let report = train_and_evaluate(cfg, train_set, test_set, &setup.eval)?;
            Ok(ViewRun { axis, seed, mean_dice: report.mean_dice })
        })
        .collect()
}

/// Axial full-variant runs already present in an ablation report.
pub fn axial_runs_from(report: &[AblationRun]) -> Vec<ViewRun> {
    report
        .iter()
        .filter(|r| r.variant == Variant::Full)
        .map(|r| ViewRun { axis: ResidualAxis::Axial, seed: r.seed, mean_dice: r.mean_dice })
        .collect()
}

/// Pooled Dice per axis and the max-minus-min spread check.
pub fn view_parity(runs: &[ViewRun]) -> (Vec<(ResidualAxis, f64)>, Check) {
    let pooled: Vec<(ResidualAxis, f64)> = ResidualAxis::ALL
        .iter()
        .filter_map(|&axis| {
            let d: Vec<f64> = runs.iter().filter(|r| r.axis == axis).map(|r| r.mean_dice).collect();
            (!d.is_empty()).then(|| (axis, d.iter().sum::<f64>() / d.len() as f64))
        })
        .collect();
    let hi = pooled.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = pooled.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut check = Check::at_most("view_spread", hi - lo, VIEW_TOLERANCE);
    check.passed &= pooled.len() == 3 && check.value.is_finite();
    (pooled, check)
}

pub fn run_suite(suite: Suite, seed: u64, ablation_seeds: &[u64]) -> Result<VerifyReport> {
    match suite {
        Suite::Gradcheck => run_gradcheck(seed),
        Suite::Oracle => run_oracle(seed),
        Suite::Ablation => run_ablation_suite(&AblationSetup::default(), ablation_seeds),
    }
}
