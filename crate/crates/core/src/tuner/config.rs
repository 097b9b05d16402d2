use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which selected backbone layer feeds which attention sub-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionMode {
    /// Self attention over the alignment layer, cross attention to the
    /// uniformity layer.
    #[serde(alias = "a2u")]
    AToU,
    /// Self attention over the uniformity layer, cross attention to the
    /// alignment layer.
    #[serde(alias = "u2a")]
    UToA,
}

impl ConnectionMode {
    pub fn short_name(self) -> &'static str {
        match self {
            ConnectionMode::AToU => "a2u",
            ConnectionMode::UToA => "u2a",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2u" | "a_to_u" => Ok(ConnectionMode::AToU),
            "u2a" | "u_to_a" => Ok(ConnectionMode::UToA),
            other => Err(Error::Config(format!(
                "unknown connection mode {other:?} (expected a2u or u2a)"
            ))),
        }
    }
}

/// Two-layer MLP applied per token to both backbone streams before the
/// blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reduction {
    pub hidden_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    pub n_blocks: usize,
    /// Width of the block stack: the backbone width without reduction, the
    /// reduction output width with it.
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_multiplier: usize,
    pub connection_mode: ConnectionMode,
    pub reduction: Option<Reduction>,
    pub layer_norm_eps: f64,
    pub seed: u64,
    /// Backbone layer with the best alignment.
    pub align_layer: u32,
    /// Backbone layer with the best uniformity.
    pub uniform_layer: u32,
    /// `false` drops the cross sub-layer (and its norm) from every block.
    pub cross_attention: bool,
    /// Blocks after the first take keys/values of their self sub-layer from
    /// the self-side backbone stream instead of the previous block output.
    pub reread_self_source: bool,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            d_model: 64,
            n_heads: 4,
            ffn_multiplier: 4,
            connection_mode: ConnectionMode::AToU,
            reduction: None,
            layer_norm_eps: 1e-5,
            seed: 0,
            align_layer: 0,
            uniform_layer: 0,
            cross_attention: true,
            reread_self_source: false,
        }
    }
}

impl TunerConfig {
    /// Checks the config against a backbone of width `d_llm`.
    pub fn validate(&self, d_llm: usize) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_multiplier == 0 {
            return Err(Error::Config(
                "d_model, n_heads and ffn_multiplier must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        match self.reduction {
            Some(r) => {
                if r.hidden_dim == 0 || r.out_dim == 0 {
                    return Err(Error::Config("reduction sizes must be positive".into()));
                }
                if r.out_dim != self.d_model {
                    return Err(Error::Config(format!(
                        "reduction out_dim {} must equal d_model {}",
                        r.out_dim, self.d_model
                    )));
                }
            }
            None => {
                if self.d_model != d_llm {
                    return Err(Error::Config(format!(
                        "without reduction d_model ({}) must equal the backbone width ({d_llm})",
                        self.d_model
                    )));
                }
            }
        }
        Ok(())
    }

    /// Backbone layers feeding (self sub-layer, cross sub-layer).
    pub fn source_layers(&self) -> (u32, u32) {
        match self.connection_mode {
            ConnectionMode::AToU => (self.align_layer, self.uniform_layer),
            ConnectionMode::UToA => (self.uniform_layer, self.align_layer),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_multiplier
    }
}

/// Closed-form parameter count.
///
/// With `d` the block width and `m` the FFN multiplier:
///
/// * attention sub-layer: `4d² + 4d` (Q, K, V, output projections with biases)
/// * feed-forward: `2md² + md + d`
/// * layer norm: `2d`
/// * block: `attn·(1 + c) + ffn + norm·(2 + c)` where `c = 1` with cross attention
/// * reduction MLP (shared by both streams): `d_llm·h + h + h·o + o`
pub fn count_params(config: &TunerConfig, d_llm: usize) -> usize {
    let d = config.d_model;
    let m = config.ffn_multiplier;
    let cross = usize::from(config.cross_attention);
    let attn = 4 * d * d + 4 * d;
    let ffn = 2 * m * d * d + m * d + d;
    let norm = 2 * d;
    let block = attn * (1 + cross) + ffn + norm * (2 + cross);
    let reduction = config
        .reduction
        .map_or(0, |r| d_llm * r.hidden_dim + r.hidden_dim + r.hidden_dim * r.out_dim + r.out_dim);
    reduction + config.n_blocks * block
}
