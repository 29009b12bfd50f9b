use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the backbone plus every hyperparameter of the conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_mid: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Expert-embedding width `d_e`.
    pub expert_dim: usize,
    pub experts: usize,
    /// Width of the frozen hypernetwork input rows.
    pub hn_input: usize,
    /// Hidden size of each direction of the recurrent encoder.
    pub hn_hidden: usize,
    /// Target ratio of active prunable parameters, in (0, 1].
    pub target_ratio: f32,
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub tau: f32,
    pub gumbel_bias: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            d_mid: 512,
            vocab: 256,
            max_seq: 256,
            expert_dim: 32,
            experts: 4,
            hn_input: 32,
            hn_hidden: 16,
            target_ratio: 0.5,
            alpha: 16.0,
            beta: 2.0,
            gamma: 1.0,
            tau: 0.4,
            gumbel_bias: 3.0,
        }
    }
}

impl ModelConfig {
    /// A two-layer configuration small enough for exhaustive gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_mid: 16,
            vocab: 16,
            max_seq: 16,
            expert_dim: 4,
            experts: 2,
            hn_input: 4,
            hn_hidden: 2,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Number of RoPE pairs per head, `d/(2H)`.
    pub fn rope_half(&self) -> usize {
        self.head_dim() / 2
    }

    /// One MHA slot and one MLP slot per block.
    pub fn slots(&self) -> usize {
        2 * self.layers
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.d_mid == 0 || self.vocab == 0 {
            return fail("layers, d_model, d_mid and vocab must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary pairing", self.head_dim()));
        }
        if self.experts < 2 {
            return fail(format!("need at least 2 experts, got {}", self.experts));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return fail(format!("target_ratio {} outside (0, 1]", self.target_ratio));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if self.max_seq == 0 || self.expert_dim == 0 || self.hn_input == 0 || self.hn_hidden == 0 {
            return fail("max_seq, expert_dim, hn_input and hn_hidden must be positive".into());
        }
        Ok(())
    }
}
