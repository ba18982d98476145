use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_AU: usize = 12;
pub const N_EXPR: usize = 8;
pub const N_VA: usize = 2;
pub const N_QUERIES: usize = N_AU + N_EXPR + N_VA;

/// Query rows owned by each task.
pub const AU_QUERIES: Range<usize> = 0..N_AU;
pub const EXPR_QUERIES: Range<usize> = N_AU..N_AU + N_EXPR;
pub const VA_QUERIES: Range<usize> = N_AU + N_EXPR..N_QUERIES;

/// Number of fused EXPR+VA nodes (and mask vectors).
pub const N_FUSED: usize = N_EXPR + N_VA;

/// Backbone feature geometry: 17×17 patch grid, 1536 channels.
pub const BACKBONE_PATCHES: usize = 289;
pub const BACKBONE_CHANNELS: usize = 1536;

/// Architecture hyperparameters. The task layout (12/8/2 queries) is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_patches: usize,
    pub in_channels: usize,
    /// Width between the two pointwise compression convolutions.
    pub conv_hidden: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_blocks: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_patches: BACKBONE_PATCHES,
            in_channels: BACKBONE_CHANNELS,
            conv_hidden: 512,
            d_model: 128,
            n_heads: 4,
            ffn_hidden: 512,
            n_blocks: 4,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_patches", self.n_patches),
            ("in_channels", self.in_channels),
            ("conv_hidden", self.conv_hidden),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("n_blocks", self.n_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidArgument("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attention = 4 * (d * d + d);
        let ffn = d * self.ffn_hidden + self.ffn_hidden + self.ffn_hidden * d + d;
        let norm = 2 * d;
        let compress = self.in_channels * self.conv_hidden
            + self.conv_hidden
            + self.conv_hidden * d
            + d;
        let first_block = attention + ffn + 2 * norm;
        let other_blocks = (self.n_blocks - 1) * (2 * attention + ffn + 3 * norm);
        let gcn = 3 * d * d + N_FUSED * d + N_AU * N_AU + N_FUSED * N_FUSED;
        let heads = N_QUERIES * d + N_QUERIES;
        compress + self.n_patches * d + N_QUERIES * d + first_block + other_blocks + gcn + heads
    }
}
