use conres_core::data::{choose_corner, crop_at, VolumeSample};
use conres_core::losses::{res_loss_level_with_weights, seg_loss, Reduction, BCE_FLOOR};
use conres_core::masks::{compute_residual_mask, reconstruct_from_residual, BinaryMask, LabelVolume, ResidualAxis};
use conres_core::metrics::{dice_score, hausdorff_distance, hausdorff_distance_edt};
use conres_core::{oracles, ConvSpec, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn mask(shape: [usize; 3]) -> impl Strategy<Value = BinaryMask> {
    let n: usize = shape.iter().product();
    (0.05f64..0.7, prop::collection::vec(0.0f64..1.0, n))
        .prop_map(move |(p, u)| BinaryMask::new(shape, u.iter().map(|&v| u8::from(v < p)).collect()).unwrap())
}

fn axis() -> impl Strategy<Value = ResidualAxis> {
    prop::sample::select(ResidualAxis::ALL.to_vec())
}

fn run<F>(f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Graph<f64>) -> conres_core::Var,
{
    let mut g = Graph::new();
    let out = f(&mut g);
    g.value(out).clone()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
    run(|g| {
        let x = g.constant(x.clone());
        let w = g.constant(w.clone());
        g.conv3d(x, w, None, spec).unwrap()
    })
}

fn conv_spec() -> impl Strategy<Value = ([usize; 3], ConvSpec)> {
    (
        prop::array::uniform3(1usize..=4),
        prop::array::uniform3(1usize..=3),
        prop::array::uniform3(1usize..=2),
        prop::array::uniform3(0usize..=2),
        prop::array::uniform3(3usize..=9),
        1usize..=3,
        1usize..=3,
    )
        .prop_filter_map("kernel wider than padded input", |(kernel, stride, dilation, padding, input, cin, cout)| {
            let spec = ConvSpec { in_channels: cin, out_channels: cout, kernel, stride, dilation, padding };
            spec.output_extents(input).ok().map(|_| (input, spec))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_is_linear(
        x1 in tensor(vec![1, 2, 4, 5, 3]),
        x2 in tensor(vec![1, 2, 4, 5, 3]),
        w in tensor(vec![3, 2, 3, 3, 3]),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let spec = ConvSpec::cubic(2, 3, 3);
        let mix = x1.zip_map(&x2, |p, q| a * p + b * q).unwrap();
        let lhs = conv(&mix, &w, spec);
        let rhs = conv(&x1, &w, spec).zip_map(&conv(&x2, &w, spec), |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn upsample_stays_within_input_range(x in tensor(vec![1, 2, 3, 2, 4]), scale in prop::array::uniform3(1usize..=3)) {
        let y = run(|g| {
            let v = g.constant(x.clone());
            g.upsample_trilinear(v, scale).unwrap()
        });
        let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(y.shape(), &[1, 2, 3 * scale[0], 2 * scale[1], 4 * scale[2]][..]);
        prop_assert!(y.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn upsample_preserves_constants(c in -5.0f64..5.0, scale in prop::array::uniform3(1usize..=4)) {
        let x = Tensor::full(vec![1, 1, 2, 3, 2], c);
        let y = run(|g| {
            let v = g.constant(x.clone());
            g.upsample_trilinear(v, scale).unwrap()
        });
        prop_assert!(y.data().iter().all(|&v| (v - c).abs() < 1e-12));
        prop_assert!((y.mean() - c).abs() < 1e-12);
    }

    #[test]
    fn group_norm_standardizes_each_group(x in tensor(vec![2, 4, 3, 3, 4]), groups in prop::sample::select(vec![1usize, 2, 4])) {
        let y = run(|g| {
            let v = g.constant(x.clone());
            let gamma = g.constant(Tensor::full(vec![4], 1.0));
            let beta = g.constant(Tensor::zeros(vec![4]));
            g.group_norm(v, groups, gamma, beta, 1e-10).unwrap()
        });
        let per = 4 / groups * 36;
        for block in y.data().chunks(per) {
            let mean = block.iter().sum::<f64>() / per as f64;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_standardize_centres_each_filter(w in tensor(vec![3, 2, 3, 3, 3])) {
        let y = run(|g| {
            let v = g.constant(w.clone());
            g.weight_standardize(v, 1e-5).unwrap()
        });
        for (filter, raw) in y.data().chunks(54).zip(w.data().chunks(54)) {
            let mean = filter.iter().sum::<f64>() / 54.0;
            let var = filter.iter().map(|v| v * v).sum::<f64>() / 54.0;
            let rm = raw.iter().sum::<f64>() / 54.0;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 54.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - rv / (rv + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn abs_diff_is_nonnegative_with_zero_first_slice(x in tensor(vec![1, 2, 4, 3, 5]), dim in 2usize..5) {
        let y = run(|g| {
            let v = g.constant(x.clone());
            g.slicewise_abs_diff(v, dim).unwrap()
        });
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        let shape = x.shape().to_vec();
        let inner: usize = shape[dim + 1..].iter().product();
        let n = shape[dim];
        for o in 0..shape[..dim].iter().product::<usize>() {
            for j in 0..inner {
                prop_assert_eq!(y.data()[o * n * inner + j], 0.0);
            }
        }
    }

    #[test]
    fn seg_loss_falls_along_path_to_target(
        z in prop::collection::vec(-3.0f64..3.0, 2 * 27),
        bits in prop::collection::vec(any::<bool>(), 2 * 27),
    ) {
        let target = Tensor::new(vec![1, 2, 3, 3, 3], bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        let p0: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let pred = Tensor::new(
                vec![1, 2, 3, 3, 3],
                p0.iter().zip(target.data()).map(|(p, y)| (1.0 - t) * p + t * y).collect(),
            )
            .unwrap();
            let loss = run(|g| {
                let p = g.constant(pred);
                seg_loss(g, p, &target, 1e-5, Reduction::Sum).unwrap()
            })
            .item();
            prop_assert!(loss <= prev + 1e-9, "loss rose to {loss} from {prev} at t={t}");
            prev = loss;
        }
    }

    #[test]
    fn unit_weight_residual_loss_is_summed_bce(
        p in prop::collection::vec(0.0f64..=1.0, 64),
        bits in prop::collection::vec(any::<bool>(), 64),
    ) {
        let y: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        let target = Tensor::new(vec![1, 1, 4, 4, 4], y.clone()).unwrap();
        let ours = run(|g| {
            let v = g.constant(Tensor::new(vec![1, 1, 4, 4, 4], p.clone()).unwrap());
            let ones = Tensor::full(vec![1, 1, 4, 4, 4], 1.0);
            res_loss_level_with_weights(g, v, &target, &ones, Reduction::Sum).unwrap()
        })
        .item();
        let expect = oracles::summed_bce(&p, &y, BCE_FLOOR);
        prop_assert!((ours - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv_output_extents_follow_shape_law((input, spec) in conv_spec()) {
        let x = Tensor::full(vec![1, spec.in_channels, input[0], input[1], input[2]], 1.0);
        let w = Tensor::full(spec.weight_shape(), 0.5);
        let y = conv(&x, &w, spec);
        for a in 0..3 {
            let law = (input[a] + 2 * spec.padding[a] - spec.dilation[a] * (spec.kernel[a] - 1) - 1) / spec.stride[a] + 1;
            prop_assert_eq!(y.shape()[2 + a], law);
        }
        prop_assert_eq!(y.shape()[1], spec.out_channels);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dice_matches_oracle(a in mask([8, 8, 8]), b in mask([8, 8, 8]), eps in prop::sample::select(vec![0.0, 1e-5, 1.0])) {
        let ours = dice_score(&a, &b, eps);
        if a.count() + b.count() == 0 && eps == 0.0 {
            prop_assert!(ours.is_err());
        } else {
            prop_assert_eq!(ours.unwrap(), oracles::dice(&a, &b, eps));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn hausdorff_matches_oracle(a in mask([8, 8, 8]), b in mask([8, 8, 8])) {
        let expect = oracles::hausdorff(&a, &b, [1.0; 3]).unwrap();
        prop_assert_eq!(hausdorff_distance(&a, &b, [1.0; 3]).unwrap(), expect);
        prop_assert_eq!(hausdorff_distance_edt(&a, &b, [1.0; 3]).unwrap(), expect);
        prop_assert_eq!(
            hausdorff_distance(&a, &b, [2.5, 1.0, 0.75]).unwrap(),
            oracles::hausdorff(&a, &b, [2.5, 1.0, 0.75]).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn residual_is_binary_and_complement_invariant(m in mask([5, 6, 7]), axis in axis()) {
        let r = compute_residual_mask(&m, axis).unwrap();
        prop_assert!(r.data().iter().all(|&v| v <= 1));
        prop_assert_eq!(&r, &compute_residual_mask(&m.complement(), axis).unwrap());
        prop_assert_eq!(&r, &oracles::residual_mask(&m, axis));
    }

    #[test]
    fn xor_reconstruction_recovers_mask(m in mask([6, 5, 4]), axis in axis()) {
        let r = compute_residual_mask(&m, axis).unwrap();
        prop_assert_eq!(reconstruct_from_residual(&m.first_slice(axis), &r, axis).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn crops_stay_inside_the_volume(
        blocks in prop::array::uniform3(1usize..=4),
        extra in prop::array::uniform3(0usize..=9),
        fill in prop::array::uniform2(1usize..=4),
        seed in any::<u64>(),
        fg_bias in 0.0f64..=1.0,
    ) {
        let patch = blocks.map(|b| b * 8);
        let volume = [patch[0] + extra[0], patch[1] + extra[1], patch[2] + extra[2]];
        let n = volume.iter().product();
        let labels = (0..n).map(|i| u8::from(i % (volume[2] * fill[0]) == fill[1])).collect();
        let label = LabelVolume::new(volume, labels, 1).unwrap();
        let sample = VolumeSample::new(Tensor::zeros(vec![1, volume[0], volume[1], volume[2]]), label, [1.0; 3], "p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corner = choose_corner(&sample, patch, &mut rng, fg_bias).unwrap();
        for k in 0..3 {
            prop_assert!(corner[k] + patch[k] <= volume[k]);
        }
        let crop = crop_at(&sample, corner, patch).unwrap();
        prop_assert_eq!(crop.spatial_shape(), patch);
    }
}
