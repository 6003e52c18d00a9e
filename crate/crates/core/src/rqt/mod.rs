//! A toy RQ-Transformer.
//!
//! A temporal transformer summarizes the previous steps into a context vector
//! `z_s`; a small depth transformer then predicts the `K` tokens of step `s`
//! one stream at a time. The first stream is predicted by a dedicated linear
//! map of `z_s`.

pub mod autodiff;
mod checkpoint;
mod loss;
mod model;
mod params;
mod sampling;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use loss::{loss, LossWeights};
pub use model::{RqtModel, TemporalCache};
pub use params::ParamStore;
pub use sampling::{derive_seed, sample_step, sample_token};

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// How the tokens of one step are predicted from `z_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    /// Autoregressive depth transformer over the streams of a step.
    Joint,
    /// One linear classification head per stream, all reading `z_s`.
    IndependentHeads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqtConfig {
    pub d_temporal: usize,
    pub d_depth: usize,
    pub temporal_layers: usize,
    pub depth_layers: usize,
    pub heads: usize,
    /// Hidden width of the gated feed-forward blocks, as a multiple of the
    /// model width.
    pub ffn_mult: usize,
    /// Grid cardinalities `N_k`, including the reserved initial id.
    pub cardinalities: Vec<usize>,
    pub depthwise_params: bool,
    pub depth_kind: DepthKind,
    pub rope_base: f64,
    /// Extra gain on the output heads' initialization, which keeps initial
    /// predictions close to uniform.
    pub head_init_scale: f64,
    pub seed: u64,
}

impl RqtConfig {
    /// Toy defaults: widths 64/32, two layers each, two heads.
    pub fn toy(cardinalities: Vec<usize>) -> Self {
        Self {
            d_temporal: 64,
            d_depth: 32,
            temporal_layers: 2,
            depth_layers: 2,
            heads: 2,
            ffn_mult: 2,
            cardinalities,
            depthwise_params: true,
            depth_kind: DepthKind::Joint,
            rope_base: 10_000.0,
            head_init_scale: 0.1,
            seed: 0,
        }
    }

    pub fn num_streams(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(input_err!("need at least one stream"));
        }
        if let Some(n) = self.cardinalities.iter().find(|&&n| n < 2) {
            return Err(input_err!("stream cardinality {n} is below 2"));
        }
        if self.heads == 0 {
            return Err(input_err!("head count must be positive"));
        }
        for (name, width) in [("d_temporal", self.d_temporal), ("d_depth", self.d_depth)] {
            if width == 0 || width % self.heads != 0 {
                return Err(input_err!("{name}={width} is not a positive multiple of {} heads", self.heads));
            }
            if !(width / self.heads).is_multiple_of(2) {
                return Err(input_err!("{name}={width} gives an odd head size"));
            }
        }
        if self.ffn_mult == 0 {
            return Err(input_err!("ffn_mult must be positive"));
        }
        Ok(())
    }

    /// Number of depth-transformer positions (streams 2..K).
    pub fn depth_positions(&self) -> usize {
        self.num_streams() - 1
    }

    /// Number of distinct copies of the per-position depth weights.
    pub fn depth_groups(&self) -> usize {
        if self.depthwise_params {
            self.depth_positions()
        } else {
            1
        }
    }

    /// Size of one copy of the depth transformer's linear and feed-forward
    /// weights, i.e. what each extra position costs with depthwise params.
    pub fn depth_block_size(&self) -> usize {
        let d = self.d_depth;
        let h = self.ffn_mult * d;
        self.d_temporal * d + self.depth_layers * (4 * d * d + 3 * d * h)
    }
}

/// The temporal context vector `z_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

/// Logits `l_{s,k}` for every stream of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits(pub Vec<Vec<f64>>);
