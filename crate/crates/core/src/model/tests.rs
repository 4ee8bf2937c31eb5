use super::*;
use crate::autodiff::Graph;
use crate::error::Error;
use crate::masks::ResidualAxis;
use crate::tensor::Tensor;

fn input(shape: [usize; 5], seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape.to_vec(), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

fn tap<'a>(out: &'a ForwardOutput, name: &str) -> &'a Tensor<f32> {
    &out.taps.iter().find(|(n, _)| n == name).expect("tap exists").1
}

#[test]
fn shapes_trajectory_and_ranges() {
    let cfg = ModelConfig::default();
    let params = build_model(&cfg, 1).unwrap();
    let out = predict(&params, &cfg, &input([1, 1, 16, 16, 16], 3)).unwrap();
    assert_eq!(out.seg.shape(), &[1, 1, 16, 16, 16]);
    assert_eq!(out.res.len(), 3);
    for r in &out.res {
        assert_eq!(r.shape(), &[1, 1, 16, 16, 16]);
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(out.seg.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let expect = [
        ("enc.l0", [8, 16]),
        ("enc.l1", [16, 8]),
        ("enc.l2", [32, 4]),
        ("enc.l3", [64, 2]),
        ("bottleneck", [64, 2]),
        ("dec.l2", [32, 4]),
        ("dec.l1", [16, 8]),
        ("dec.l0", [8, 16]),
    ];
    for (name, [c, e]) in expect {
        assert_eq!(tap(&out, name).shape(), &[1, c, e, e, e], "{name}");
    }
}

#[test]
fn baseline_has_no_residual_outputs_or_params() {
    let cfg = ModelConfig {
        variant: Variant::Baseline,
        ..Default::default()
    };
    let params = build_model(&cfg, 1).unwrap();
    assert!(params.names().all(|n| !n.contains(".res.")));
    let out = predict(&params, &cfg, &input([1, 1, 8, 8, 8], 1)).unwrap();
    assert!(out.res.is_empty());
}

#[test]
fn parameter_counts() {
    let count = |variant, base| {
        let cfg = ModelConfig {
            variant,
            base_channels: base,
            ..Default::default()
        };
        count_params(&build_model(&cfg, 0).unwrap()).parameters as f64
    };
    let (full, res_only, base) = (count(Variant::Full, 8), count(Variant::ResOnly, 8), count(Variant::Baseline, 8));
    assert!(base < full);
    assert_eq!(full, res_only);
    assert!((full - base) / base < 0.10, "increase {}", (full - base) / base);
    let ratio = count(Variant::Full, 16) / full;
    assert!((3.5..=4.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn initialisation_is_deterministic() {
    let cfg = ModelConfig::default();
    assert_eq!(build_model(&cfg, 9).unwrap(), build_model(&cfg, 9).unwrap());
    assert_ne!(build_model(&cfg, 9).unwrap(), build_model(&cfg, 10).unwrap());
}

#[test]
fn forward_is_bitwise_repeatable() {
    let cfg = ModelConfig::default();
    let params = build_model(&cfg, 4).unwrap();
    let x = input([1, 1, 8, 16, 8], 2);
    assert_eq!(predict(&params, &cfg, &x).unwrap(), predict(&params, &cfg, &x).unwrap());
}

#[test]
fn indivisible_extent_rejected_before_compute() {
    let cfg = ModelConfig::default();
    let params = build_model(&cfg, 0).unwrap();
    let err = predict(&params, &cfg, &input([1, 1, 12, 16, 16], 0)).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn incompatible_group_count_rejected() {
    let cfg = ModelConfig {
        base_channels: 6,
        ..Default::default()
    };
    // 12 channels cannot be split into 8 groups
    assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn sagittal_and_coronal_axes_run() {
    for axis in [ResidualAxis::Sagittal, ResidualAxis::Coronal] {
        let cfg = ModelConfig {
            residual_axis: axis,
            ..Default::default()
        };
        let params = build_model(&cfg, 2).unwrap();
        let out = predict(&params, &cfg, &input([1, 1, 8, 16, 24], 5)).unwrap();
        assert!(out.res.iter().all(|r| r.shape() == [1, 1, 8, 16, 24]));
    }
}

#[test]
fn multiclass_softmax_sums_to_one() {
    let cfg = ModelConfig {
        mode: OutputMode::Multiclass { classes: 2 },
        ..Default::default()
    };
    let params = build_model(&cfg, 3).unwrap();
    let out = predict(&params, &cfg, &input([1, 1, 8, 8, 8], 6)).unwrap();
    assert_eq!(out.seg.shape(), &[1, 3, 8, 8, 8]);
    assert_eq!(out.res[0].shape(), &[1, 2, 8, 8, 8]);
    let plane = 512;
    for v in 0..plane {
        let s: f32 = (0..3).map(|c| out.seg.data()[c * plane + v]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn attention_multiplier_within_bounds() {
    let cfg = ModelConfig::default();
    let params = build_model(&cfg, 8).unwrap();
    let out = predict(&params, &cfg, &input([1, 1, 8, 8, 8], 8)).unwrap();
    for level in ["dec.l2", "dec.l1", "dec.l0"] {
        let f = tap(&out, &format!("{level}.fuse"));
        let o = tap(&out, level);
        for (&a, &b) in f.data().iter().zip(o.data()) {
            if a > 1e-6 {
                let r = b / a;
                assert!(r > 1.0 && r < 2.0 + 1e-6, "ratio {r}");
            }
        }
    }
}

#[test]
fn full_reduces_to_res_only_under_constant_gate() {
    // Tiny eps makes group norm scale-invariant, so a uniform 1.5x gate only
    // survives into the segmentation head, where it is compensated.
    let base = ModelConfig {
        norm_eps: 1e-12,
        ..Default::default()
    };
    let full = ModelConfig {
        variant: Variant::Full,
        ..base
    };
    let res_only = ModelConfig {
        variant: Variant::ResOnly,
        ..base
    };
    let mut params = build_model(&full, 12).unwrap();
    let names: Vec<String> = params
        .names()
        .filter(|n| n.ends_with("res.conv_out.norm.beta"))
        .map(str::to_string)
        .collect();
    assert_eq!(names.len(), 3);
    for n in &names {
        params.get_mut(n).unwrap().data_mut().fill(-1e4);
    }
    let x = input([1, 1, 8, 8, 8], 12);
    let reference = predict(&params, &res_only, &x).unwrap();
    for w in params.get_mut("seg_head.weight").unwrap().data_mut() {
        *w /= 1.5;
    }
    let gated = predict(&params, &full, &x).unwrap();
    let diff = gated.seg_logits.max_abs_diff(&reference.seg_logits);
    assert!(diff <= 1e-5, "max diff {diff}");
    for (a, b) in gated.res.iter().zip(&reference.res) {
        assert!(a.max_abs_diff(b) <= 1e-5);
    }
}

/// Makes every conv kernel symmetric under swapping its S and H taps.
fn symmetrise_kernels(params: &mut ModelParams) {
    for (_, t) in params.iter_mut() {
        let s = t.shape().to_vec();
        if s.len() != 5 || s[2] != s[3] {
            continue;
        }
        let swapped = t.permute(&[0, 1, 3, 2, 4]).unwrap();
        let avg = t.zip_map(&swapped, |a, b| 0.5 * (a + b)).unwrap();
        *t = avg;
    }
}

#[test]
fn swapping_slice_and_height_axes_permutes_residuals() {
    let axial = ModelConfig::default();
    let sagittal = ModelConfig {
        residual_axis: ResidualAxis::Sagittal,
        ..axial
    };
    let mut params = build_model(&axial, 21).unwrap();
    symmetrise_kernels(&mut params);
    let x = input([1, 1, 8, 8, 16], 21);
    let xt = x.permute(&[0, 1, 3, 2, 4]).unwrap();
    let a = predict(&params, &axial, &x).unwrap();
    let b = predict(&params, &sagittal, &xt).unwrap();
    for (ra, rb) in a.res.iter().zip(&b.res) {
        let back = rb.permute(&[0, 1, 3, 2, 4]).unwrap();
        assert!(ra.max_abs_diff(&back) < 1e-5);
    }
    let seg_back = b.seg.permute(&[0, 1, 3, 2, 4]).unwrap();
    assert!(a.seg.max_abs_diff(&seg_back) < 1e-5);
}

#[test]
fn layout_mismatch_is_reported() {
    let full = ModelConfig::default();
    let baseline = ModelConfig {
        variant: Variant::Baseline,
        ..full
    };
    let params = build_model(&baseline, 0).unwrap();
    assert!(matches!(params.check_layout(&full), Err(Error::NameSetMismatch(_))));
    assert!(params.check_layout(&baseline).is_ok());
}

#[test]
fn gradients_reach_every_parameter() {
    let cfg = ModelConfig::default();
    let params = build_model(&cfg, 5).unwrap();
    let mut g = Graph::<f32>::new();
    let vars = register_params(&mut g, &params, true).unwrap();
    let x = g.input(input([1, 1, 8, 8, 8], 5));
    let out = forward(&mut g, &vars, &cfg, x).unwrap();
    let mut loss = g.sum(out.seg);
    for r in &out.res {
        let s = g.sum(*r);
        loss = g.add(loss, s).unwrap();
    }
    let grads = g.backward(loss).unwrap().params(&g);
    assert_eq!(grads.len(), params.len());
    for (name, t) in &grads {
        assert_eq!(t.shape(), params.get(name).unwrap().shape());
        assert!(t.is_finite());
    }
}
