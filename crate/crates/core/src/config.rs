//! Dimensional and training hyperparameters shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{AcvError, Result};
use crate::trainloss::LossWeights;

/// Every dimension of the network. Channel counts are derived from
/// `width_scale` through [`ChannelPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Maximum disparity `D` at full resolution.
    pub max_disp: usize,
    /// Multiplier on the reference channel widths (1 = 64/128/128 levels).
    pub width_scale: f64,
    /// Residual blocks in the l1 stage and in each of the l2/l3 stages.
    pub residual_depths: [usize; 2],
    /// Stacked hourglasses after the pre-hourglass block (0..=3).
    pub hourglasses: usize,
    /// Channels per correlation group (`N_f / N_g`).
    pub group_channels: usize,
    /// Hourglasses halve the disparity axis along with the spatial axes.
    /// Disable for disparity extents below 4.
    pub hourglass_halves_disparity: bool,
    /// Hypotheses sampled per pixel by the fast path.
    pub hypotheses: usize,
    /// `N_c^f`: channels of the 1/2-resolution fast-path features.
    pub fast_feature_channels: usize,
    /// Width of the fast path's sparse-volume aggregation network.
    pub fast_agg_channels: usize,
    /// Residual depths of the fast path's backbone.
    pub fast_residual_depths: [usize; 2],
    pub loss_weights: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Desk-scale preset: quarter width, D = 32.
    pub fn desk() -> Self {
        Self {
            max_disp: 32,
            width_scale: 0.25,
            residual_depths: [4, 2],
            hourglasses: 2,
            group_channels: 8,
            hourglass_halves_disparity: true,
            hypotheses: 6,
            fast_feature_channels: 4,
            fast_agg_channels: 2,
            fast_residual_depths: [2, 1],
            loss_weights: LossWeights::default(),
        }
    }

    /// Reference channel widths (N_c = 32, N_f = 320, N_g = 40) on a
    /// D = 32 disparity range.
    pub fn paper_shapes() -> Self {
        Self {
            width_scale: 1.0,
            residual_depths: [16, 3],
            fast_feature_channels: 16,
            fast_agg_channels: 8,
            ..Self::desk()
        }
    }

    /// Smallest end-to-end network: eighth width, D = 8.
    pub fn tiny() -> Self {
        Self {
            max_disp: 8,
            width_scale: 0.125,
            residual_depths: [1, 1],
            hourglass_halves_disparity: false,
            fast_feature_channels: 2,
            fast_agg_channels: 2,
            fast_residual_depths: [1, 1],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" | "desk-rds" => Ok(Self::desk()),
            "paper-shapes" => Ok(Self::paper_shapes()),
            "tiny" => Ok(Self::tiny()),
            other => Err(AcvError::Unknown {
                kind: "preset",
                name: other.to_string(),
                known: "desk-rds, paper-shapes, tiny".into(),
            }),
        }
    }

    pub fn channels(&self) -> Result<ChannelPlan> {
        ChannelPlan::new(self.width_scale, self.group_channels)
    }

    /// Disparity extent at 1/4 resolution.
    pub fn disp4(&self) -> usize {
        self.max_disp / 4
    }

    pub fn validate(&self) -> Result<()> {
        self.channels()?;
        if self.max_disp == 0 || self.max_disp % 4 != 0 {
            return Err(AcvError::config(format!("max_disp {} must be a positive multiple of 4", self.max_disp)));
        }
        if self.hourglasses > 3 {
            return Err(AcvError::config(format!("hourglasses {} outside 0..=3", self.hourglasses)));
        }
        if self.hourglass_halves_disparity && self.disp4() % 4 != 0 {
            return Err(AcvError::config(format!(
                "disparity extent D/4 = {} cannot be halved twice by the hourglass",
                self.disp4()
            )));
        }
        if self.hypotheses < 2 || self.hypotheses % 2 != 0 {
            return Err(AcvError::config(format!("hypotheses {} must be even and >= 2", self.hypotheses)));
        }
        if self.fast_feature_channels == 0 || self.fast_agg_channels == 0 {
            return Err(AcvError::config("fast path channel counts must be positive"));
        }
        self.loss_weights.validate()
    }

    /// Checks that an input of `height x width` can flow through every stage.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
            return Err(AcvError::config(format!("input {height}x{width} must be a positive multiple of 8")));
        }
        Ok(())
    }
}

/// Channel counts derived from a width scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    pub stem: usize,
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    /// `N_f = l1 + l2 + l3`.
    pub concat: usize,
    /// `N_c`.
    pub compressed: usize,
    pub compress_hidden: usize,
    /// `C_agg`, the top width of the 3-D aggregation networks.
    pub aggregate: usize,
    pub group_channels: usize,
    /// Groups per level `(g1, g2, g3)`.
    pub group_split: [usize; 3],
}

fn scaled(base: usize, s: f64) -> Result<usize> {
    let v = base as f64 * s;
    let r = v.round();
    if r < 1.0 || (v - r).abs() > 1e-9 {
        return Err(AcvError::config(format!("width_scale {s} gives non-integral width {v} from {base}")));
    }
    Ok(r as usize)
}

impl ChannelPlan {
    pub fn new(width_scale: f64, group_channels: usize) -> Result<Self> {
        if !(width_scale.is_finite() && width_scale > 0.0) {
            return Err(AcvError::config(format!("width_scale {width_scale} must be positive")));
        }
        if group_channels == 0 {
            return Err(AcvError::config("group_channels must be positive"));
        }
        let (l1, l2, l3) = (scaled(64, width_scale)?, scaled(128, width_scale)?, scaled(128, width_scale)?);
        for (name, c) in [("l1", l1), ("l2", l2), ("l3", l3)] {
            if c % group_channels != 0 {
                return Err(AcvError::config(format!(
                    "{name} width {c} is not divisible by {group_channels} channels per group"
                )));
            }
        }
        Ok(Self {
            stem: scaled(32, width_scale)?,
            l1,
            l2,
            l3,
            concat: l1 + l2 + l3,
            compressed: scaled(32, width_scale)?,
            compress_hidden: scaled(128, width_scale)?,
            aggregate: scaled(32, width_scale)?,
            group_channels,
            group_split: [l1 / group_channels, l2 / group_channels, l3 / group_channels],
        })
    }

    /// `N_g`.
    pub fn groups(&self) -> usize {
        self.group_split.iter().sum()
    }
}
