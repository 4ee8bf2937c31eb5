//! Flat `key = value` run configuration with command-line overrides.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! [`RunConfig::to_text`] writes every key, so a snapshot fully determines a run.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::container::{read_file, write_file};
use crate::data::{ObjectFamily, PhantomSpec};
use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::model::OutputMode;
use crate::train::{EvalConfig, TrainConfig};

pub const SNAPSHOT_FILE: &str = "resolved.cfg";

/// Everything a command may need: training, evaluation and phantom settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub phantom: PhantomSpec,
    /// Z-score each image channel when loading data.
    pub normalize: bool,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_triple<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3]>
where
    T::Err: Display,
{
    let parts: Vec<&str> = value.split('x').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::config(format!("`{key}` expects AxBxC, got `{value}`")));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

fn triple<T: Display>(v: &[T; 3]) -> String {
    format!("{}x{}x{}", v[0], v[1], v[2])
}

fn parse_reduction(key: &str, value: &str) -> Result<Reduction> {
    match value {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        _ => Err(Error::config(format!("`{key}` must be sum or mean, got `{value}`"))),
    }
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Sum => "sum",
        Reduction::Mean => "mean",
    }
}

fn family_name(f: ObjectFamily) -> &'static str {
    match f {
        ObjectFamily::Sphere => "sphere",
        ObjectFamily::Ellipsoid => "ellipsoid",
        ObjectFamily::Lobed => "lobed",
        ObjectFamily::Mixed => "mixed",
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("`{key}` must be true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn new() -> Self {
        Self {
            normalize: true,
            ..Default::default()
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let m = &mut t.model;
        let p = &mut self.phantom;
        match key {
            "model.in_channels" => m.in_channels = parse(key, value)?,
            "model.base_channels" => m.base_channels = parse(key, value)?,
            "model.variant" => m.variant = parse(key, value)?,
            "model.residual_axis" => m.residual_axis = parse(key, value)?,
            "model.mode" => {
                let n = m.mode.label_classes();
                m.mode = match value {
                    "binary" => OutputMode::Binary { targets: n },
                    "multiclass" => OutputMode::Multiclass { classes: n },
                    _ => return Err(Error::config(format!("`{key}` must be binary or multiclass"))),
                }
            }
            "model.classes" => {
                let n: usize = parse(key, value)?;
                m.mode = match m.mode {
                    OutputMode::Binary { .. } => OutputMode::Binary { targets: n },
                    OutputMode::Multiclass { .. } => OutputMode::Multiclass { classes: n },
                }
            }
            "model.dilation" => m.dilation_last_stage = parse(key, value)?,
            "model.max_groups" => m.max_groups = parse(key, value)?,
            "model.norm_eps" => m.norm_eps = parse(key, value)?,
            "model.ws_eps" => m.ws_eps = parse(key, value)?,
            "train.iterations" => t.iterations = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.adam.weight_decay = parse(key, value)?,
            "train.beta1" => t.adam.beta1 = parse(key, value)?,
            "train.beta2" => t.adam.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam.eps = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_interval" => t.eval_interval = parse(key, value)?,
            "train.patch" => t.patch = parse_triple(key, value)?,
            "train.fg_bias" => t.fg_bias = parse(key, value)?,
            "train.flip_prob" => t.augment.flip_prob = parse(key, value)?,
            "train.scale_min" => t.augment.scale_range.0 = parse(key, value)?,
            "train.scale_max" => t.augment.scale_range.1 = parse(key, value)?,
            "loss.lambda" => t.loss.lambda = parse(key, value)?,
            "loss.dice_eps" => t.loss.dice_eps = parse(key, value)?,
            "loss.reduction" => t.loss.reduction = parse_reduction(key, value)?,
            "loss.target_reduction" => t.loss.target_reduction = parse_reduction(key, value)?,
            "eval.patch" => self.eval.patch = parse_triple(key, value)?,
            "eval.threshold" => self.eval.threshold = parse(key, value)?,
            "eval.dice_eps" => self.eval.dice_eps = parse(key, value)?,
            "data.shape" => p.shape = parse_triple(key, value)?,
            "data.channels" => p.channels = parse(key, value)?,
            "data.objects_min" => p.objects.0 = parse(key, value)?,
            "data.objects_max" => p.objects.1 = parse(key, value)?,
            "data.family" => p.family = parse(key, value)?,
            "data.radius_min" => p.radius.0 = parse(key, value)?,
            "data.radius_max" => p.radius.1 = parse(key, value)?,
            "data.classes" => p.classes = parse(key, value)?,
            "data.background" => p.background = parse(key, value)?,
            "data.contrast" => p.contrast = parse(key, value)?,
            "data.noise_std" => p.noise_std = parse(key, value)?,
            "data.spacing" => p.spacing = parse_triple(key, value)?,
            "data.normalize" => self.normalize = parse_bool(key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides; the result is validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::new();
        if let Some(path) = path {
            let bytes = read_file(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
            cfg.parse_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.phantom.validate()?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::config("eval.threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let p = &self.phantom;
        let mode = match m.mode {
            OutputMode::Binary { .. } => "binary",
            OutputMode::Multiclass { .. } => "multiclass",
        };
        let rows: Vec<(&str, String)> = vec![
            ("model.in_channels", m.in_channels.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.variant", m.variant.to_string()),
            ("model.residual_axis", m.residual_axis.to_string()),
            ("model.mode", mode.to_string()),
            ("model.classes", m.mode.label_classes().to_string()),
            ("model.dilation", m.dilation_last_stage.to_string()),
            ("model.max_groups", m.max_groups.to_string()),
            ("model.norm_eps", m.norm_eps.to_string()),
            ("model.ws_eps", m.ws_eps.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.adam.weight_decay.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.adam_eps", t.adam.eps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_interval", t.eval_interval.to_string()),
            ("train.patch", triple(&t.patch)),
            ("train.fg_bias", t.fg_bias.to_string()),
            ("train.flip_prob", t.augment.flip_prob.to_string()),
            ("train.scale_min", t.augment.scale_range.0.to_string()),
            ("train.scale_max", t.augment.scale_range.1.to_string()),
            ("loss.lambda", t.loss.lambda.to_string()),
            ("loss.dice_eps", t.loss.dice_eps.to_string()),
            ("loss.reduction", reduction_name(t.loss.reduction).to_string()),
            ("loss.target_reduction", reduction_name(t.loss.target_reduction).to_string()),
            ("eval.patch", triple(&self.eval.patch)),
            ("eval.threshold", self.eval.threshold.to_string()),
            ("eval.dice_eps", self.eval.dice_eps.to_string()),
            ("data.shape", triple(&p.shape)),
            ("data.channels", p.channels.to_string()),
            ("data.objects_min", p.objects.0.to_string()),
            ("data.objects_max", p.objects.1.to_string()),
            ("data.family", family_name(p.family).to_string()),
            ("data.radius_min", p.radius.0.to_string()),
            ("data.radius_max", p.radius.1.to_string()),
            ("data.classes", p.classes.to_string()),
            ("data.background", p.background.to_string()),
            ("data.contrast", p.contrast.to_string()),
            ("data.noise_std", p.noise_std.to_string()),
            ("data.spacing", triple(&p.spacing)),
            ("data.normalize", self.normalize.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(SNAPSHOT_FILE), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::ResidualAxis;
    use crate::model::Variant;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::new();
        cfg.apply_overrides(&["model.variant=res_only", "train.patch=8x16x16", "model.mode=multiclass", "model.classes=3", "loss.lambda = 0"])
            .unwrap();
        let mut again = RunConfig::new();
        again.parse_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.train.model.variant, Variant::ResOnly);
        assert_eq!(cfg.train.model.mode, OutputMode::Multiclass { classes: 3 });
        assert_eq!(cfg.train.loss.lambda, 0.0);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::new();
        assert!(matches!(cfg.set("train.learning_rate", "1"), Err(Error::Config(_))));
        let err = cfg.parse_text("# comment\n\nmodel.axis = axial\n").unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn comments_and_whitespace() {
        let mut cfg = RunConfig::new();
        cfg.parse_text("model.residual_axis = coronal   # view\n  train.seed=9\n").unwrap();
        assert_eq!(cfg.train.model.residual_axis, ResidualAxis::Coronal);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn invalid_combination_fails_validation() {
        let mut cfg = RunConfig::new();
        cfg.set("train.patch", "12x16x16").unwrap();
        assert!(cfg.validate().is_err());
    }
}
