use serde::{Deserialize, Serialize};

use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::model::Variant;

use super::evaluate::{evaluate, EvalConfig, EvalReport};
use super::trainer::{train, RunOptions, TrainConfig};

/// Allowed shortfall of `res_only` against `baseline` in the pooled ordering check.
pub const ORDERING_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub mean_dice: f64,
    pub mean_hd: Option<f64>,
    pub hd_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_dice: f64,
    pub mean_hd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub pooled: Vec<VariantSummary>,
    /// Seeds on which `full` scored at least `baseline`; `None` unless both ran.
    pub full_ge_baseline_seeds: Option<usize>,
    /// `full >= res_only >= baseline - ORDERING_TOLERANCE` on pooled Dice; `None` unless all three ran.
    pub pooled_ordering: Option<bool>,
}

impl AblationReport {
    pub fn pooled_dice(&self, variant: Variant) -> Option<f64> {
        self.pooled.iter().find(|p| p.variant == variant).map(|p| p.mean_dice)
    }

    fn run(&self, variant: Variant, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }
}

/// Trains one configuration and scores it on `test`.
pub fn train_and_evaluate(config: TrainConfig, train_set: &[VolumeSample], test_set: &[VolumeSample], eval: &EvalConfig) -> Result<EvalReport> {
    let trainer = train(config.clone(), train_set, &RunOptions::default())?;
    evaluate(trainer.params(), &config.model, test_set, eval)
}

/// Assembles a report from finished runs.
pub fn summarize_runs(runs: Vec<AblationRun>, seeds: &[u64]) -> AblationReport {
    let mut variants: Vec<Variant> = Vec::new();
    for r in &runs {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let pooled = variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let hds: Vec<f64> = mine.iter().filter_map(|r| r.mean_hd).collect();
            VariantSummary {
                variant,
                mean_dice: mine.iter().map(|r| r.mean_dice).sum::<f64>() / mine.len() as f64,
                mean_hd: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
            }
        })
        .collect();
    let mut report = AblationReport {
        runs,
        pooled,
        full_ge_baseline_seeds: None,
        pooled_ordering: None,
    };
    let has = |v| variants.contains(&v);
    if has(Variant::Full) && has(Variant::Baseline) {
        report.full_ge_baseline_seeds = Some(
            seeds
                .iter()
                .filter(|&&s| match (report.run(Variant::Full, s), report.run(Variant::Baseline, s)) {
                    (Some(f), Some(b)) => f.mean_dice >= b.mean_dice,
                    _ => false,
                })
                .count(),
        );
    }
    if let (Some(f), Some(r), Some(b)) = (
        report.pooled_dice(Variant::Full),
        report.pooled_dice(Variant::ResOnly),
        report.pooled_dice(Variant::Baseline),
    ) {
        report.pooled_ordering = Some(f >= r && r >= b - ORDERING_TOLERANCE);
    }
    report
}

/// Trains every variant for every seed on the same split.
pub fn run_ablation(config: &AblationConfig, train_set: &[VolumeSample], test_set: &[VolumeSample]) -> Result<AblationReport> {
    if config.seeds.is_empty() || config.variants.is_empty() {
        return Err(Error::config("ablation needs at least one seed and one variant"));
    }
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        for &variant in &config.variants {
            let mut cfg = config.base.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            let report = train_and_evaluate(cfg, train_set, test_set, &config.eval)?;
            runs.push(AblationRun {
                variant,
                seed,
                mean_dice: report.mean_dice,
                mean_hd: report.mean_hd,
                hd_undefined: report.hd_undefined,
            });
        }
    }
    Ok(summarize_runs(runs, &config.seeds))
}
