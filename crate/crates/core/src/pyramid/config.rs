use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liquid::{DecaySharingMode, DtPolicy, DEFAULT_DROPOUT, DEFAULT_DT, DEFAULT_EPSILON, DEFAULT_KERNEL};

/// Shape and hyper-parameters of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Raw feature dimension fed to the stem.
    pub input_dim: usize,
    /// Channel count `C` of every block.
    pub embed_dim: usize,
    pub levels: usize,
    pub downsample_stride: usize,
    pub blocks_per_level: usize,
    pub kernel_size: usize,
    /// Seconds per level-0 token of the input features.
    pub token_dt: f64,
    /// Structural time step of the decay; independent of `token_dt`.
    pub dt_policy: DtPolicy,
    pub decay_sharing: DecaySharingMode,
    pub epsilon: f64,
    pub dropout: f64,
    /// Shared linear + ReLU layers before the class/regression projections.
    pub head_layers: usize,
    pub num_classes: usize,
    /// Initial foreground probability of the classification head.
    pub cls_prior: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            embed_dim: 64,
            levels: 6,
            downsample_stride: 2,
            blocks_per_level: 1,
            kernel_size: DEFAULT_KERNEL,
            token_dt: DEFAULT_DT,
            dt_policy: DtPolicy::default(),
            decay_sharing: DecaySharingMode::BlockShared,
            epsilon: DEFAULT_EPSILON,
            dropout: DEFAULT_DROPOUT,
            head_layers: 2,
            num_classes: 5,
            cls_prior: 0.01,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels == 0 {
            return fail("levels must be >= 1");
        }
        if self.downsample_stride < 2 && self.levels > 1 {
            return fail("downsample_stride must be >= 2");
        }
        if self.input_dim == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return fail("input_dim, embed_dim and num_classes must be positive");
        }
        if self.blocks_per_level == 0 {
            return fail("blocks_per_level must be >= 1");
        }
        if self.kernel_size % 2 == 0 {
            return fail("kernel_size must be odd");
        }
        if !(self.epsilon > 0.0) || !(self.dt_policy.base_dt > 0.0) || !(self.token_dt > 0.0) {
            return fail("epsilon, base_dt and token_dt must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.cls_prior > 0.0 && self.cls_prior < 1.0) {
            return fail("cls_prior must lie in (0, 1)");
        }
        Ok(())
    }

    /// Cumulative stride of `level` relative to level 0.
    pub fn level_stride(&self, level: usize) -> usize {
        self.downsample_stride.pow(level as u32)
    }

    /// Input lengths are right-padded to a multiple of this.
    pub fn length_multiple(&self) -> usize {
        self.level_stride(self.levels - 1)
    }

    /// Right-padded length: a multiple of [`Self::length_multiple`], long
    /// enough that the coarsest level still spans half the depthwise kernel.
    pub fn padded_len(&self, t: usize) -> usize {
        let m = self.length_multiple();
        let min_top = self.kernel_size.div_ceil(2).max(1);
        t.div_ceil(m).max(min_top) * m
    }

    pub fn level_lengths(&self, padded: usize) -> Vec<usize> {
        (0..self.levels).map(|l| padded / self.level_stride(l)).collect()
    }

    /// Trainable decay scalars across the whole pyramid.
    pub fn decay_param_count(&self) -> usize {
        self.levels * self.blocks_per_level * self.decay_sharing.num_params(self.embed_dim)
    }
}
