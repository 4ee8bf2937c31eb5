use super::*;
use crate::autodiff::Graph;
use crate::data::{generate_phantom, PhantomSpec, VolumeSample};
use crate::error::Error;
use crate::losses::residual_loss_evaluations;
use crate::masks::BinaryMask;
use crate::model::{build_model, forward, predict, register_params, ModelConfig, Variant};

fn tiny_set(n: u64) -> Vec<VolumeSample> {
    (0..n)
        .map(|i| {
            generate_phantom(&PhantomSpec {
                shape: [8, 16, 16],
                radius: (2.0, 4.0),
                noise_std: 0.1,
                seed: 100 + i,
                ..Default::default()
            })
            .unwrap()
        })
        .collect()
}

fn tiny_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            variant,
            base_channels: 4,
            ..Default::default()
        },
        iterations: 6,
        batch_size: 2,
        lr: 1e-3,
        patch: [8, 8, 16],
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let data = tiny_set(2);
    let a = train(tiny_config(Variant::Full), &data, &RunOptions::default()).unwrap();
    let b = train(tiny_config(Variant::Full), &data, &RunOptions::default()).unwrap();
    assert_eq!(
        encode_checkpoint(&a.checkpoint()).unwrap(),
        encode_checkpoint(&b.checkpoint()).unwrap()
    );
    assert_eq!(log_to_csv(a.log()), log_to_csv(b.log()));
    assert!(log_to_csv(a.log()).starts_with("t,lr,loss_seg,loss_res,loss_total,mean_dice,mean_hd\n"));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let data = tiny_set(2);
    let full = train(tiny_config(Variant::Full), &data, &RunOptions::default()).unwrap();
    let mut first = Trainer::new(tiny_config(Variant::Full)).unwrap();
    first
        .run(
            &data,
            &RunOptions {
                stop_at: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
    let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(decode_checkpoint(&bytes).unwrap()).unwrap();
    resumed.run(&data, &RunOptions::default()).unwrap();
    assert_eq!(resumed.params(), full.params());
    assert_eq!(&full.log()[3..], resumed.log());
}

#[test]
fn checkpoint_bytes_are_stable() {
    let data = tiny_set(1);
    let t = train(tiny_config(Variant::ResOnly), &data, &RunOptions::default()).unwrap();
    let bytes = encode_checkpoint(&t.checkpoint()).unwrap();
    let again = encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(bytes, again);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &t.checkpoint()).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), t.checkpoint());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let cfg = tiny_config(Variant::Baseline);
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let ckpt = trainer.checkpoint();
    let full = ModelConfig {
        variant: Variant::Full,
        ..cfg.model
    };
    assert!(matches!(ckpt.params_for(&full), Err(Error::NameSetMismatch(_))));
    let mut wrong_cfg = ckpt.clone();
    wrong_cfg.config.model.variant = Variant::Full;
    assert!(matches!(Trainer::from_checkpoint(wrong_cfg), Err(Error::NameSetMismatch(_))));
    let mut bytes = encode_checkpoint(&ckpt).unwrap();
    bytes[7] = b'9';
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::VersionMismatch { .. })));
    let bytes = encode_checkpoint(&ckpt).unwrap();
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 4]),
        Err(Error::PayloadSizeMismatch { .. })
    ));
}

#[test]
fn baseline_never_evaluates_residual_loss() {
    let data = tiny_set(1);
    let before = residual_loss_evaluations();
    train(tiny_config(Variant::Baseline), &data, &RunOptions::default()).unwrap();
    assert_eq!(residual_loss_evaluations(), before);
    let t = train(tiny_config(Variant::Full), &data, &RunOptions::default()).unwrap();
    assert_eq!(residual_loss_evaluations(), before + 3 * t.iteration());
    assert!(t.log().iter().all(|r| r.loss_res > 0.0));
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let data = tiny_set(1);
    let cfg = tiny_config(Variant::Full);
    let mut params = build_model(&cfg.model, 0).unwrap();
    params.get_mut("seg_head.bias").unwrap().data_mut()[0] = f32::NAN;
    let mut t = Trainer::with_params(cfg, params.clone()).unwrap();
    let err = t.step(&data).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { iteration: 0 } | Error::Validation(_)));
    assert_eq!(t.iteration(), 0);
    assert_eq!(t.params().get("enc.stem.conv.conv.weight"), params.get("enc.stem.conv.conv.weight"));
}

#[test]
fn full_volume_tile_equals_untiled_forward() {
    let cfg = ModelConfig {
        base_channels: 4,
        ..Default::default()
    };
    let params = build_model(&cfg, 1).unwrap();
    let sample = &tiny_set(1)[0];
    let tiled = predict_volume(&params, &cfg, &sample.image, [8, 16, 16]).unwrap();
    let x = sample.image.clone().reshape(vec![1, 1, 8, 16, 16]).unwrap();
    let direct = predict(&params, &cfg, &x).unwrap();
    assert_eq!(tiled.seg_logits.data(), direct.seg_logits.data());
    assert_eq!(tiled.res[0].data(), direct.res[0].data());
    // overlapping tiles still give finite probabilities everywhere
    let overlapped = predict_volume(&params, &cfg, &sample.image, [8, 8, 8]).unwrap();
    assert!(overlapped.seg.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn tile_origins_cover_the_axis() {
    assert_eq!(tile_starts(16, 16), vec![0]);
    assert_eq!(tile_starts(32, 16), vec![0, 8, 16]);
    assert_eq!(tile_starts(40, 16), vec![0, 8, 16, 24]);
    assert_eq!(tile_starts(8, 16), vec![0]);
}

#[test]
fn empty_prediction_scores_zero_with_undefined_distance() {
    let target = BinaryMask::from_fn([4, 4, 4], |s, _, _| s == 1);
    let empty = BinaryMask::zeros([4, 4, 4]);
    let m = score_masks("x", &[empty], &[target.clone()], [1.0; 3], 1e-5).unwrap();
    assert_eq!(m.dice, vec![0.0]);
    assert_eq!(m.hd, vec![None]);
    let report = summarize(vec![m, score_masks("y", &[target.clone()], &[target], [1.0; 3], 1e-5).unwrap()]);
    assert_eq!(report.hd_undefined, 1);
    assert_eq!(report.mean_hd, Some(0.0));
    assert_eq!(report.min_dice, 0.0);
}

#[test]
fn joint_gradient_is_sum_of_parts() {
    let cfg = ModelConfig {
        base_channels: 4,
        ..Default::default()
    };
    let params = build_model(&cfg, 2).unwrap();
    let batch = make_batch(&tiny_set(1), &cfg).unwrap().cast::<f64>();
    let grads_of = |which: u8| {
        let mut g = Graph::<f64>::new();
        let vars = register_params(&mut g, &params, true).unwrap();
        let x = g.input(batch.image.clone());
        let out = forward(&mut g, &vars, &cfg, x).unwrap();
        let l = record_loss(&mut g, out.seg, &out.res, &batch, &LossConfig::default()).unwrap();
        let target = match which {
            0 => l.seg,
            1 => l.res.unwrap(),
            _ => l.total,
        };
        g.backward(target).unwrap().params(&g)
    };
    let (seg, res, total) = (grads_of(0), grads_of(1), grads_of(2));
    for (name, t) in &total {
        let sum = seg[name].zip_map(&res[name], |a, b| a + b).unwrap();
        let scale = t.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(t.max_abs_diff(&sum) <= 1e-6 * scale, "{name}");
    }
}

#[test]
fn zero_lambda_keeps_only_final_level() {
    let cfg = ModelConfig {
        base_channels: 4,
        ..Default::default()
    };
    let params = build_model(&cfg, 2).unwrap();
    let batch = make_batch(&tiny_set(1), &cfg).unwrap();
    let mut g = Graph::<f32>::new();
    let vars = register_params(&mut g, &params, false).unwrap();
    let x = g.input(batch.image.clone());
    let out = forward(&mut g, &vars, &cfg, x).unwrap();
    let loss = LossConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let l = record_loss(&mut g, out.seg, &out.res, &batch, &loss).unwrap();
    let l0 = crate::losses::res_loss_level(&mut g, out.res[0], &batch.res_target, loss.reduction).unwrap();
    assert_eq!(g.value(l.res.unwrap()).item(), g.value(l0).item());
}

#[test]
fn periodic_checkpoints_and_logs_are_written() {
    let data = tiny_set(2);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Variant::Full);
    cfg.eval_interval = 2;
    let opts = RunOptions {
        eval_set: Some(&data[..1]),
        eval: EvalConfig {
            patch: [8, 16, 16],
            ..Default::default()
        },
        out_dir: Some(dir.path().to_path_buf()),
        stop_at: None,
    };
    let t = train(cfg, &data, &opts).unwrap();
    let ckpt = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.iteration, 6);
    assert!(ckpt.metrics.is_some());
    let csv = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(t.log().iter().filter(|r| r.mean_dice.is_some()).count(), 3);
}
