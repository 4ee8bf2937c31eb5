use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::container::write_file;
use crate::data::{augment, crop_patch, AugmentConfig, VolumeSample};
use crate::error::{Error, Result};
use crate::model::{build_model, forward, register_params, ModelConfig, ModelParams, DOWNSAMPLE};
use crate::seeding::{derive_seed, stream_rng};

use super::batch::{make_batch, record_loss, LossConfig};
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::evaluate::{evaluate, EvalConfig};
use super::optim::{adam_step, poly_lr, AdamConfig, AdamState};

const INIT_STREAM: u64 = 0x1417;
const DATA_STREAM: u64 = 0xda7a;

pub const LOG_HEADER: &str = "t,lr,loss_seg,loss_res,loss_total,mean_dice,mean_hd";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Evaluate and checkpoint every this many iterations; 0 disables.
    pub eval_interval: usize,
    pub patch: [usize; 3],
    pub fg_bias: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            iterations: 500,
            batch_size: 2,
            lr: 1e-4,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            eval_interval: 0,
            patch: [16, 32, 32],
            fg_bias: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.loss.lambda >= 0.0) || !(self.loss.dice_eps > 0.0) {
            return Err(Error::config("lambda must be >= 0 and dice eps > 0"));
        }
        if self.patch.iter().any(|&p| p == 0 || p % DOWNSAMPLE != 0) {
            return Err(Error::config(format!(
                "patch {:?} must be positive multiples of {DOWNSAMPLE}",
                self.patch
            )));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(Error::config(format!("fg_bias must lie in [0, 1], got {}", self.fg_bias)));
        }
        Ok(())
    }

    /// Seed used for parameter initialisation.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, INIT_STREAM)
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: usize,
    pub lr: f64,
    pub loss_seg: f64,
    /// Zero for the baseline variant.
    pub loss_res: f64,
    pub loss_total: f64,
    pub mean_dice: Option<f64>,
    pub mean_hd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub iteration: usize,
    pub mean_dice: f64,
    pub mean_hd: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.t,
            r.lr,
            r.loss_seg,
            r.loss_res,
            r.loss_total,
            opt(r.mean_dice),
            opt(r.mean_hd)
        );
    }
    out
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_file(path, log_to_csv(rows).as_bytes())
}

/// Where periodic evaluation and checkpoints go.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub eval_set: Option<&'a [VolumeSample]>,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
    /// Stop after this iteration count instead of the configured total.
    pub stop_at: Option<usize>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "metrics.csv";

/// Owns the model being optimised and everything needed to resume it.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    adam: AdamState,
    t: usize,
    log: Vec<LogRow>,
    best: Option<MetricSnapshot>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = build_model(&config.model, config.init_seed())?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: TrainConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config.model)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            config,
            params,
            adam,
            t: 0,
            log: Vec::new(),
            best: None,
        })
    }

    /// Continues from a checkpoint; the log restarts empty.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.params.check_layout(&ckpt.config.model)?;
        Ok(Self {
            config: ckpt.config,
            params: ckpt.params,
            adam: ckpt.adam,
            t: ckpt.iteration,
            log: Vec::new(),
            best: ckpt.metrics,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn best(&self) -> Option<MetricSnapshot> {
        self.best
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.t,
            metrics: self.best,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// The augmented patches used at iteration `t`; depends only on `(seed, t)`.
    pub fn batch_samples(&self, data: &[VolumeSample], t: usize) -> Result<Vec<VolumeSample>> {
        if data.is_empty() {
            return Err(Error::validation("training set is empty"));
        }
        let mut rng = stream_rng(derive_seed(self.config.seed, DATA_STREAM), t as u64);
        (0..self.config.batch_size)
            .map(|_| {
                let sample = &data[rng.random_range(0..data.len())];
                let patch = crop_patch(sample, self.config.patch, &mut rng, self.config.fg_bias)?;
                Ok(augment(&patch, &self.config.augment, &mut rng))
            })
            .collect()
    }

    /// One optimisation step. On a non-finite loss the parameters are left untouched.
    pub fn step(&mut self, data: &[VolumeSample]) -> Result<LogRow> {
        let cfg = &self.config;
        if self.t >= cfg.iterations {
            return Err(Error::Usage(format!("training already finished {} iterations", cfg.iterations)));
        }
        let lr = poly_lr(cfg.lr, self.t, cfg.iterations)?;
        let batch = make_batch(&self.batch_samples(data, self.t)?, &cfg.model)?;
        let mut g = Graph::<f32>::new();
        let vars = register_params(&mut g, &self.params, true)?;
        let x = g.input(batch.image.clone());
        let out = forward(&mut g, &vars, &cfg.model, x)?;
        if std::iter::once(&out.seg).chain(&out.res).any(|&v| !g.value(v).is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: self.t });
        }
        let loss = record_loss(&mut g, out.seg, &out.res, &batch, &cfg.loss)?;
        let total = g.value(loss.total).item() as f64;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.t });
        }
        let grads = g.backward(loss.total)?.params(&g);
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &cfg.adam)?;
        let row = LogRow {
            t: self.t,
            lr,
            loss_seg: g.value(loss.seg).item() as f64,
            loss_res: loss.res.map_or(0.0, |r| g.value(r).item() as f64),
            loss_total: total,
            mean_dice: None,
            mean_hd: None,
        };
        self.t += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    fn evaluate_and_save(&mut self, opts: &RunOptions<'_>) -> Result<()> {
        if let Some(set) = opts.eval_set {
            let report = evaluate(&self.params, &self.config.model, set, &opts.eval)?;
            let snap = MetricSnapshot {
                iteration: self.t,
                mean_dice: report.mean_dice,
                mean_hd: report.mean_hd,
            };
            if self.best.is_none_or(|b| snap.mean_dice > b.mean_dice) {
                self.best = Some(snap);
            }
            if let Some(last) = self.log.last_mut() {
                last.mean_dice = Some(report.mean_dice);
                last.mean_hd = report.mean_hd;
            }
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &self.checkpoint())?;
            write_log_csv(&dir.join(LOG_FILE), &self.log)?;
        }
        Ok(())
    }

    /// Trains to completion (or `stop_at`), evaluating and checkpointing at the configured interval and at the end.
    pub fn run(&mut self, data: &[VolumeSample], opts: &RunOptions<'_>) -> Result<()> {
        let stop = opts.stop_at.unwrap_or(self.config.iterations).min(self.config.iterations);
        while self.t < stop {
            self.step(data)?;
            let interval = self.config.eval_interval;
            if interval > 0 && self.t % interval == 0 && self.t < stop {
                self.evaluate_and_save(opts)?;
            }
        }
        self.evaluate_and_save(opts)
    }
}

/// Builds, trains and returns a model.
pub fn train(config: TrainConfig, data: &[VolumeSample], opts: &RunOptions<'_>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(data, opts)?;
    Ok(trainer)
}
