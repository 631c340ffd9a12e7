use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::minutiae_map::MapConfig;
use crate::spatial_transform::AlignmentBounds;

/// Relative weights of the three data terms of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub texture: f64,
    pub minutiae: f64,
    pub map: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            texture: 1.0,
            minutiae: 1.0,
            map: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_h: usize,
    pub in_w: usize,
    /// Output channels of each conv/ReLU/max-pool stem stage.
    pub stem_channels: Vec<usize>,
    pub branch_channels: usize,
    /// Per-branch embedding size; templates are twice this long.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub map_c: usize,
    /// Spatial and angular width of the target minutiae maps.
    pub map_sigma: f64,
    /// Side of the average-pooled grid feeding the minutiae embedding.
    pub minutiae_pool: usize,
    pub use_localizer: bool,
    /// Side of the average-pooled input the localizer regresses from.
    pub loc_pool: usize,
    pub dropout_keep: f64,
    pub weight_decay: f64,
    pub loc_lr_scale: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_h: 64,
            in_w: 64,
            stem_channels: vec![8, 16],
            branch_channels: 16,
            embed_dim: 32,
            num_classes: 2,
            map_h: 16,
            map_w: 16,
            map_c: 6,
            map_sigma: 1.0,
            minutiae_pool: 4,
            use_localizer: false,
            loc_pool: 8,
            dropout_keep: 0.8,
            weight_decay: 4e-5,
            loc_lr_scale: 0.035,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Feature-map height and width after the stem.
    pub fn feature_dims(&self) -> (usize, usize) {
        let f = 1usize << self.stem_channels.len();
        (self.in_h / f, self.in_w / f)
    }

    pub fn stem_out_channels(&self) -> usize {
        *self.stem_channels.last().unwrap_or(&1)
    }

    pub fn template_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn map_len(&self) -> usize {
        self.map_h * self.map_w * self.map_c
    }

    /// Encoding used for the map-head targets.
    pub fn map_config(&self) -> MapConfig {
        MapConfig {
            sigma_s: self.map_sigma,
            sigma_o: self.map_sigma,
            ..MapConfig::with_dims(self.map_h, self.map_w, self.map_c)
        }
    }

    /// Localizer output bounds, rescaled to the input width.
    pub fn alignment_bounds(&self) -> AlignmentBounds {
        AlignmentBounds::scaled_to(self.in_w)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_h", self.in_h),
            ("in_w", self.in_w),
            ("branch_channels", self.branch_channels),
            ("embed_dim", self.embed_dim),
            ("map_h", self.map_h),
            ("map_w", self.map_w),
            ("map_c", self.map_c),
            ("minutiae_pool", self.minutiae_pool),
            ("loc_pool", self.loc_pool),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(validation(format!("{name} must be positive")));
            }
        }
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return Err(validation("stem_channels must be a non-empty list of positive counts"));
        }
        if self.num_classes < 2 {
            return Err(validation("num_classes must be at least 2"));
        }
        let f = 1usize << self.stem_channels.len();
        if self.in_h % f != 0 || self.in_w % f != 0 {
            return Err(validation(format!(
                "input {}x{} is not divisible by the stem stride {f}",
                self.in_h, self.in_w
            )));
        }
        let (fh, fw) = self.feature_dims();
        if (self.map_h, self.map_w) != (fh, fw) {
            return Err(validation(format!(
                "map head is {}x{} but the stem produces {fh}x{fw} features",
                self.map_h, self.map_w
            )));
        }
        if fh % self.minutiae_pool != 0 || fw % self.minutiae_pool != 0 {
            return Err(validation("minutiae_pool must divide the feature map size"));
        }
        if self.use_localizer && (self.in_h % self.loc_pool != 0 || self.in_w % self.loc_pool != 0) {
            return Err(validation("loc_pool must divide the input size"));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(validation("dropout_keep must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(validation("weight_decay must be finite and non-negative"));
        }
        if !(self.loc_lr_scale >= 0.0 && self.loc_lr_scale.is_finite()) {
            return Err(validation("loc_lr_scale must be finite and non-negative"));
        }
        if !(self.map_sigma > 0.0 && self.map_sigma.is_finite()) {
            return Err(validation("map_sigma must be positive"));
        }
        let w = &self.loss_weights;
        if [w.texture, w.minutiae, w.map].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(validation("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}
