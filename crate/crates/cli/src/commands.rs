use std::error::Error as StdError;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use conres_core::config::RunConfig;
use conres_core::data::{generate_phantom, read_volume, write_volume, zscore_normalize, PhantomSpec, VolumeSample};
use conres_core::masks::{compute_residual_mask, reconstruct_from_residual, stack_masks, BinaryMask, LabelVolume, ResidualAxis};
use conres_core::model::OutputMode;
use conres_core::seeding::derive_seed;
use conres_core::train::{
    evaluate_with_losses, load_checkpoint, poly_lr, predict_volume, predicted_masks, reference_masks, score_masks,
    log_to_csv, summarize, RunOptions, Trainer, CHECKPOINT_FILE, LOG_FILE, LOG_HEADER,
};
use conres_core::verify::{run_suite, Suite, VerifyReport};
use conres_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, Global};

type CliResult<T> = Result<T, Box<dyn StdError>>;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    file: String,
    seed: u64,
    class_counts: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    count: u64,
    seed: u64,
    samples: Vec<ManifestEntry>,
}

/// Returns whether every verification check passed (always true for other commands).
pub fn run(cli: &Cli) -> CliResult<bool> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData { count, seed } => gen_data(g, *count, *seed).map(|_| true),
        Command::Train { data, seed, eval_data, variant, axis, iterations, resume, stop_at } => {
            let mut cfg = load_config(g)?;
            cfg.train.seed = *seed;
            if let Some(v) = variant {
                cfg.train.model.variant = *v;
            }
            if let Some(a) = axis {
                cfg.train.model.residual_axis = *a;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            cfg.validate()?;
            train(g, cfg, data, eval_data.as_deref(), *resume, *stop_at).map(|_| true)
        }
        Command::Eval { data, checkpoint, predictions } => {
            eval(g, data, checkpoint.as_deref(), predictions.as_deref()).map(|_| true)
        }
        Command::Predict { checkpoint, input } => predict(g, checkpoint, input).map(|_| true),
        Command::Resmask { input, axis, check } => resmask(g, input, *axis, *check),
        Command::Gradcheck { seed } => verify(g, Suite::Gradcheck, *seed, 0),
        Command::Verify { suite, seed, seeds } => verify(g, *suite, *seed, *seeds),
    }
}

fn load_config(g: &Global) -> CliResult<RunConfig> {
    Ok(RunConfig::load(g.config.as_deref(), &g.overrides)?)
}

fn out_dir(g: &Global) -> CliResult<&Path> {
    let dir = g.out.as_deref().ok_or("this command needs --out DIR")?;
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn gen_data(g: &Global, count: u64, seed: u64) -> CliResult<()> {
    let cfg = load_config(g)?;
    let out = out_dir(g)?;
    let mut samples = Vec::with_capacity(count as usize);
    for i in 0..count {
        let sample_seed = derive_seed(seed, i);
        let mut sample = generate_phantom(&PhantomSpec { seed: sample_seed, ..cfg.phantom.clone() })?;
        sample.id = format!("phantom_{i:04}");
        let file = format!("{}.vol", sample.id);
        write_volume(&out.join(&file), &sample)?;
        samples.push(ManifestEntry { id: sample.id, file, seed: sample_seed, class_counts: sample.label.class_counts() });
    }
    let manifest = Manifest { count, seed, samples };
    write_text(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    cfg.write_snapshot(out)?;
    println!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

/// Volume files of a directory: manifest order when present, else sorted `.vol` names.
fn dataset_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| format!("{}: {e}", manifest.display()))?;
        let m: Manifest = serde_json::from_str(&text)?;
        return Ok(m.samples.iter().map(|s| dir.join(&s.file)).collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vol"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format!("no volume files in {}", dir.display()).into());
    }
    Ok(files)
}

fn load_dataset(path: &Path, normalize: bool) -> CliResult<Vec<VolumeSample>> {
    let files = if path.is_dir() { dataset_files(path)? } else { vec![path.to_path_buf()] };
    files
        .iter()
        .map(|f| {
            let mut s = read_volume(f)?;
            if normalize {
                s.image = zscore_normalize(&s.image);
            }
            Ok(s)
        })
        .collect()
}

fn train(g: &Global, cfg: RunConfig, data: &Path, eval_data: Option<&Path>, resume: bool, stop_at: Option<usize>) -> CliResult<()> {
    let out = out_dir(g)?;
    let train_set = load_dataset(data, cfg.normalize)?;
    let eval_set = eval_data.map(|p| load_dataset(p, cfg.normalize)).transpose()?;
    // Log rows before the resume point live only in the previous CSV.
    let mut earlier_rows = Vec::new();
    let mut trainer = if resume {
        let ckpt = load_checkpoint(&out.join(CHECKPOINT_FILE))?;
        if ckpt.config != cfg.train {
            return Err("--resume needs the configuration the checkpoint was trained with".into());
        }
        if let Ok(text) = fs::read_to_string(out.join(LOG_FILE)) {
            earlier_rows = text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|t| t.parse::<usize>().ok()).is_some_and(|t| t < ckpt.iteration))
                .map(String::from)
                .collect();
        }
        Trainer::from_checkpoint(ckpt)?
    } else {
        Trainer::new(cfg.train.clone())?
    };
    cfg.write_snapshot(out)?;
    let opts = RunOptions {
        eval_set: eval_set.as_deref(),
        eval: cfg.eval,
        out_dir: Some(out.to_path_buf()),
        stop_at,
    };
    trainer.run(&train_set, &opts)?;
    if !earlier_rows.is_empty() {
        let mut csv = format!("{LOG_HEADER}\n");
        for row in &earlier_rows {
            csv.push_str(row);
            csv.push('\n');
        }
        csv.extend(log_to_csv(trainer.log()).lines().skip(1).map(|l| format!("{l}\n")));
        write_text(&out.join(LOG_FILE), &csv)?;
    }
    if let Some(last) = trainer.log().last() {
        println!("iteration {} loss {:.6}", last.t, last.loss_total);
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn eval(g: &Global, data: &Path, checkpoint: Option<&Path>, predictions: Option<&Path>) -> CliResult<()> {
    let mut cfg = load_config(g)?;
    let out = out_dir(g)?;
    let (report, row) = if let Some(ckpt_path) = checkpoint {
        let ckpt = load_checkpoint(ckpt_path)?;
        cfg.train = ckpt.config.clone();
        let dataset = load_dataset(data, cfg.normalize)?;
        let (report, losses) =
            evaluate_with_losses(&ckpt.params, &ckpt.config.model, &dataset, &cfg.eval, &ckpt.config.loss)?;
        let t = ckpt.iteration;
        let lr = poly_lr(ckpt.config.lr, t.min(ckpt.config.iterations), ckpt.config.iterations)?;
        let row = format!("{t},{lr},{},{},{}", losses.seg, losses.res, losses.total);
        (report, row)
    } else {
        let pred_dir = predictions.ok_or("eval needs --checkpoint or --predictions")?;
        let dataset = load_dataset(data, false)?;
        let preds = load_dataset(pred_dir, false)?;
        let model = &cfg.train.model;
        let samples = dataset
            .iter()
            .map(|sample| {
                let pred = preds
                    .iter()
                    .find(|p| p.id == sample.id)
                    .ok_or_else(|| format!("no prediction for sample `{}`", sample.id))?;
                let masks = reference_masks(pred, model)?;
                Ok(score_masks(&sample.id, &masks, &reference_masks(sample, model)?, sample.spacing, cfg.eval.dice_eps)?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        (summarize(samples), "0,,,,".to_string())
    };
    let csv = format!("{LOG_HEADER}\n{row},{},{}\n", report.mean_dice, opt(report.mean_hd));
    write_text(&out.join(EVAL_CSV), &csv)?;
    write_text(&out.join(EVAL_JSON), &serde_json::to_string_pretty(&report)?)?;
    cfg.write_snapshot(out)?;
    println!("mean dice {:.6} mean hd {}", report.mean_dice, opt(report.mean_hd));
    Ok(())
}

/// Label volume encoding predicted masks: nested targets count up, classes are exclusive.
fn masks_to_label(mode: OutputMode, masks: &[BinaryMask]) -> CliResult<LabelVolume> {
    let shape = masks[0].shape();
    let n = masks[0].len();
    let mut labels = vec![0u8; n];
    for (k, m) in masks.iter().enumerate() {
        for (l, &v) in labels.iter_mut().zip(m.data()) {
            if v == 1 {
                match mode {
                    OutputMode::Binary { .. } => *l += 1,
                    OutputMode::Multiclass { .. } => *l = k as u8 + 1,
                }
            }
        }
    }
    Ok(LabelVolume::new(shape, labels, masks.len())?)
}

fn predict(g: &Global, checkpoint: &Path, input: &Path) -> CliResult<()> {
    let mut cfg = load_config(g)?;
    let out = out_dir(g)?;
    let ckpt = load_checkpoint(checkpoint)?;
    cfg.train = ckpt.config.clone();
    let model = &ckpt.config.model;
    for sample in load_dataset(input, cfg.normalize)? {
        let pred = predict_volume(&ckpt.params, model, &sample.image, cfg.eval.patch)?;
        let seg_masks = predicted_masks(model.mode, &pred.seg, cfg.eval.threshold)?;
        let seg = VolumeSample::new(pred.seg.clone(), masks_to_label(model.mode, &seg_masks)?, sample.spacing, sample.id.clone())?;
        write_volume(&out.join(format!("{}.seg.vol", sample.id)), &seg)?;
        if let Some(res) = pred.res.first() {
            let union = BinaryMask::threshold(sample.spatial_shape(), &union_max(res), cfg.eval.threshold)?;
            let res_vol = VolumeSample::new(res.clone(), LabelVolume::from_binary(&union), sample.spacing, sample.id.clone())?;
            write_volume(&out.join(format!("{}.res.vol", sample.id)), &res_vol)?;
        }
    }
    cfg.write_snapshot(out)?;
    Ok(())
}

/// Voxelwise maximum over the leading channel axis of a `[K, S, H, W]` tensor.
fn union_max(t: &Tensor<f32>) -> Vec<f32> {
    let k = t.shape()[0];
    let plane = t.numel() / k;
    let d = t.data();
    (0..plane).map(|v| (0..k).map(|c| d[c * plane + v]).fold(f32::MIN, f32::max)).collect()
}

/// Writes `<id>.res_<axis>.vol`: one residual channel per class, label holding their union.
fn resmask(g: &Global, input: &Path, axis: ResidualAxis, check: bool) -> CliResult<bool> {
    let cfg = load_config(g)?;
    let out = out_dir(g)?;
    let mut all_ok = true;
    for sample in load_dataset(input, false)? {
        let label = &sample.label;
        let masks: Vec<BinaryMask> = (1..=label.classes())
            .map(|c| compute_residual_mask(&label.class_mask(c), axis))
            .collect::<Result<_, _>>()?;
        let union = BinaryMask::from_fn(label.shape(), |s, h, w| masks.iter().any(|m| m.get(s, h, w)));
        let vol = VolumeSample::new(stack_masks::<f32>(&masks)?, LabelVolume::from_binary(&union), sample.spacing, sample.id.clone())?;
        let path = out.join(format!("{}.res_{axis}.vol", sample.id));
        write_volume(&path, &vol)?;
        if check {
            let written = read_volume(&path)?;
            let plane = label.labels().len();
            let mut ok = true;
            for c in 1..=label.classes() {
                let truth = label.class_mask(c);
                let stored = &written.image.data()[(c - 1) * plane..c * plane];
                let residual = BinaryMask::threshold(label.shape(), stored, 0.5)?;
                ok &= reconstruct_from_residual(&truth.first_slice(axis), &residual, axis)? == truth;
            }
            println!("{}: reconstruction {}", sample.id, if ok { "exact" } else { "MISMATCH" });
            all_ok &= ok;
        }
    }
    cfg.write_snapshot(out)?;
    Ok(all_ok)
}

fn verify(g: &Global, suite: Suite, seed: u64, seeds: u64) -> CliResult<bool> {
    let training_seeds: Vec<u64> = (1..=seeds).collect();
    let report: VerifyReport = run_suite(suite, seed, &training_seeds)?;
    let json = report.to_json();
    println!("{json}");
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        write_text(&dir.join(format!("verify_{suite}.json")), &json)?;
        load_config(g)?.write_snapshot(dir)?;
    }
    let mut summary = String::new();
    for c in &report.checks {
        let _ = writeln!(summary, "{} {} value={} tolerance={}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    eprint!("{summary}");
    Ok(report.passed)
}
