use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::ResidualAxis;

/// Which decoder paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Segmentation decoder only.
    Baseline,
    /// Adds the context-residual decoder, supervised but not fed back.
    ResOnly,
    /// Residual decoder plus attention gating of the segmentation features.
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::Baseline, Self::ResOnly, Self::Full];

    pub fn has_residual(self) -> bool {
        self != Self::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::ResOnly => "res_only",
            Self::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(Self::Baseline),
            "res_only" => Ok(Self::ResOnly),
            "full" => Ok(Self::Full),
            other => Err(Error::config(format!(
                "unknown variant `{other}` (expected baseline, res_only or full)"
            ))),
        }
    }
}

/// Output head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputMode {
    /// `targets` independent sigmoid channels; target `k` is `label >= k`.
    Binary { targets: usize },
    /// Softmax over `classes + 1` channels (background first).
    Multiclass { classes: usize },
}

impl Default for OutputMode {
    fn default() -> Self {
        Self::Binary { targets: 1 }
    }
}

impl OutputMode {
    pub fn seg_channels(self) -> usize {
        match self {
            Self::Binary { targets } => targets,
            Self::Multiclass { classes } => classes + 1,
        }
    }

    pub fn res_channels(self) -> usize {
        match self {
            Self::Binary { targets } => targets,
            Self::Multiclass { classes } => classes,
        }
    }

    /// Number of foreground label values the mode expects.
    pub fn label_classes(self) -> usize {
        match self {
            Self::Binary { targets } => targets,
            Self::Multiclass { classes } => classes,
        }
    }
}

/// Architecture hyperparameters. The encoder always has five stages and the
/// decoders three upsampling stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub variant: Variant,
    pub residual_axis: ResidualAxis,
    pub mode: OutputMode,
    /// Dilation of the two residual blocks in the last encoder stage.
    pub dilation_last_stage: usize,
    /// Upper bound on group-norm groups; the actual count is `min(max_groups, C)`.
    pub max_groups: usize,
    pub norm_eps: f64,
    pub ws_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            variant: Variant::Full,
            residual_axis: ResidualAxis::Axial,
            mode: OutputMode::default(),
            dilation_last_stage: 2,
            max_groups: 8,
            norm_eps: 1e-5,
            ws_eps: 1e-5,
        }
    }
}

/// Total downsampling factor between input and bottleneck.
pub const DOWNSAMPLE: usize = 8;

impl ModelConfig {
    /// Encoder widths at full, 1/2, 1/4 and 1/8 resolution.
    pub fn encoder_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        self.max_groups.min(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("in_channels and base_channels must be >= 1"));
        }
        if self.dilation_last_stage == 0 || self.max_groups == 0 {
            return Err(Error::config("dilation and max_groups must be >= 1"));
        }
        if self.mode.label_classes() == 0 {
            return Err(Error::config("output mode needs at least one foreground class"));
        }
        if !(self.norm_eps >= 0.0 && self.ws_eps >= 0.0) {
            return Err(Error::config("normalisation eps must be >= 0"));
        }
        for c in self.encoder_channels() {
            let g = self.groups_for(c);
            if c % g != 0 {
                return Err(Error::config(format!(
                    "{g} groups do not divide {c} channels"
                )));
            }
        }
        Ok(())
    }

    /// Checks an `[N, C, S, H, W]` input shape before any compute.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::validation(format!("input must be [N, C, S, H, W], got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(Error::validation(format!(
                "input has {} channels, model expects {}",
                shape[1], self.in_channels
            )));
        }
        if shape[2..].iter().any(|&d| d % DOWNSAMPLE != 0) {
            return Err(Error::validation(format!(
                "spatial extents {:?} must be divisible by {DOWNSAMPLE}",
                &shape[2..]
            )));
        }
        Ok(())
    }
}
