//! Closed-form FLOP model.
//!
//! Convention: one multiply-add is 2 FLOPs, only matrix products are
//! counted, and training costs 3x the forward pass (backward = 2x forward).

use crate::error::{ensure, Result};
use crate::model::ModelConfig;
use crate::shuffle::{ShuffleConfig, Variant};

/// Backward costs twice the forward pass.
pub const TRAINING_FACTOR: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Transformer sequence length in fused positions.
    pub t: usize,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d > 0 && self.layers > 0 && self.heads > 0 && self.mlp_ratio > 0 && self.t > 0,
            "cost model dimensions must be positive: {self:?}"
        );
        Ok(())
    }

    /// Projections `8d²T`, MLP `4·ratio·d²T`, attention `4dT²`, per layer.
    pub fn forward_flops(&self) -> u64 {
        self.layers as u64 * (self.projection_flops() + self.mlp_flops() + self.attention_flops())
    }

    pub fn projection_flops(&self) -> u64 {
        8 * (self.d * self.d * self.t) as u64
    }

    pub fn mlp_flops(&self) -> u64 {
        4 * (self.mlp_ratio * self.d * self.d * self.t) as u64
    }

    pub fn attention_flops(&self) -> u64 {
        4 * (self.d * self.t * self.t) as u64
    }

    pub fn training_flops(&self) -> u64 {
        TRAINING_FACTOR * self.forward_flops()
    }
}

/// Forward FLOPs of the fusion operators for `tokens` visual tokens.
pub fn shuffle_forward_flops(cfg: &ShuffleConfig, d: usize, tokens: usize) -> u64 {
    if cfg.bypass_mlp {
        return 0;
    }
    let s2 = cfg.window();
    let m = tokens / s2;
    let c = d / s2;
    let hidden = cfg.hidden.unwrap_or(d);
    let blocks = 2 * cfg.n_blocks * m * d * hidden;
    let expand = tokens * c * d;
    let multiply_adds = match cfg.variant {
        Variant::Shuffle => tokens * d * c + 2 * blocks + expand,
        Variant::Drop => blocks + expand,
        Variant::Simple => 2 * m * s2 * d * d,
    };
    2 * multiply_adds as u64
}

/// Training-cost summary for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopEstimate {
    pub transformer_training: u64,
    pub shuffle_training: u64,
    pub head_training: u64,
    /// Fused positions the transformer runs on.
    pub fused_len: usize,
    /// Sequential decode steps: prompt positions plus fused visual steps.
    pub inference_steps: usize,
}

impl FlopEstimate {
    pub fn total_training(&self) -> u64 {
        self.transformer_training + self.shuffle_training + self.head_training
    }

    /// Shuffle cost relative to the transformer.
    pub fn shuffle_overhead(&self) -> f64 {
        self.shuffle_training as f64 / self.transformer_training as f64
    }
}

/// Cost of a `[prefix] grid [suffix]` sequence under `cfg`.
pub fn flops_estimate(cfg: &ModelConfig, prefix: usize, suffix: usize) -> Result<FlopEstimate> {
    let tokens = cfg.grid_h * cfg.grid_w;
    let fused_visual = cfg.shuffle.fused_len(cfg.grid_h, cfg.grid_w)?;
    let t = prefix + fused_visual + suffix;
    let cost = CostModel {
        d: cfg.d,
        layers: cfg.layers,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        t,
    };
    cost.validate()?;
    let logit_rows = prefix.saturating_sub(1) + tokens + suffix;
    Ok(FlopEstimate {
        transformer_training: cost.training_flops(),
        shuffle_training: TRAINING_FACTOR * shuffle_forward_flops(&cfg.shuffle, cfg.d, tokens),
        head_training: TRAINING_FACTOR * 2 * (logit_rows * cfg.d * cfg.vocab.total()) as u64,
        fused_len: t,
        inference_steps: inference_steps(tokens, cfg.shuffle.s, prefix),
    })
}

/// Prompt positions plus `tokens / s²` fused decode steps.
pub fn inference_steps(tokens: usize, s: usize, prefix: usize) -> usize {
    prefix + tokens / (s * s)
}
