//! Pre-norm decoder-only transformer with optional sparse MoE FFN blocks.

mod checkpoint;
mod forward;
mod gradcheck;
mod oracle;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointIndex};
pub use forward::{
    attention, block_forward, forward, lm_loss, moe_ffn, moe_ffn_forward, register, ForwardOutput,
    LossParts, MoeAux, MoeWeights,
};
pub use gradcheck::check_model_gradients;
pub use oracle::moe_ffn_oracle;
pub use params::{build_model, FfnParams, LayerParams, ModelParams, Params};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::RouterConfig;

/// Which layers carry a sparse FFN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MoePlacement {
    #[default]
    None,
    /// The last layer of every consecutive block of `k`.
    EveryK { k: usize },
    /// The final `k` layers.
    LastK { k: usize },
}

fn one() -> usize {
    1
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub moe_placement: MoePlacement,
    pub router: RouterConfig,
    #[serde(default = "one")]
    pub outer_batches: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// A small dense model; tweak fields from here.
    pub fn dense(layers: usize, d_model: usize, heads: usize, ffn_hidden: usize, vocab: usize, seq_len: usize) -> Self {
        Self {
            layers,
            d_model,
            heads,
            ffn_hidden,
            vocab,
            seq_len,
            moe_placement: MoePlacement::None,
            router: RouterConfig::new(1, 1, 2.0),
            outer_batches: 1,
            groups: 1,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `true` at every layer index that holds an MoE FFN.
    pub fn moe_layers(&self) -> Vec<bool> {
        (0..self.layers)
            .map(|i| match self.moe_placement {
                MoePlacement::None => false,
                MoePlacement::EveryK { k } => k > 0 && (i + 1) % k == 0,
                MoePlacement::LastK { k } => i + k >= self.layers,
            })
            .collect()
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_layers().iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if [self.d_model, self.heads, self.ffn_hidden, self.vocab, self.seq_len].contains(&0) {
            return fail("model dimensions must be >= 1".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for RoPE", self.head_dim()));
        }
        match self.moe_placement {
            MoePlacement::EveryK { k } if k == 0 || k > self.layers => {
                return fail(format!("every-{k} placement needs 1 <= k <= {}", self.layers))
            }
            MoePlacement::LastK { k } if k == 0 || k > self.layers => {
                return fail(format!("last-{k} placement needs 1 <= k <= {}", self.layers))
            }
            _ => {}
        }
        if self.outer_batches == 0 || self.groups == 0 {
            return fail("outer_batches and groups must be >= 1".into());
        }
        if self.num_moe_layers() > 0 {
            self.router.validate()?;
        }
        Ok(())
    }

    /// A batch of `sequences` must split evenly into `O · G` routing groups.
    pub fn validate_batch(&self, sequences: usize) -> Result<()> {
        let split = self.outer_batches * self.groups;
        if sequences == 0 || sequences % split != 0 {
            return Err(Error::Shape(format!(
                "{sequences} sequences do not divide into O={} x G={} groups",
                self.outer_batches, self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    /// Weights touched by one token: all dense weights plus `K` experts per MoE layer.
    pub activated: usize,
}

/// Closed-form weight census for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let (m, h, v) = (cfg.d_model, cfg.ffn_hidden, cfg.vocab);
    let shared = 2 * v * m + m;
    let per_layer = 4 * m * m + 2 * m;
    let mut total = shared + cfg.layers * per_layer;
    let mut activated = total;
    for is_moe in cfg.moe_layers() {
        if is_moe {
            let (e, k) = (cfg.router.num_experts, cfg.router.top_k);
            let expert = 2 * m * h;
            total += m * e + e * expert;
            activated += m * e + k * expert;
        } else {
            total += 3 * m * h;
            activated += 3 * m * h;
        }
    }
    ParamCount { total, activated }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, placement: MoePlacement) -> ModelConfig {
        let mut c = ModelConfig::dense(layers, 8, 2, 16, 32, 4);
        c.moe_placement = placement;
        c.router = RouterConfig::new(4, 2, 2.0);
        c
    }

    fn moe_indices(c: &ModelConfig) -> Vec<usize> {
        c.moe_layers()
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    #[test]
    fn every_k_places_last_of_each_block() {
        assert_eq!(moe_indices(&cfg(8, MoePlacement::EveryK { k: 4 })), vec![3, 7]);
        assert_eq!(moe_indices(&cfg(8, MoePlacement::EveryK { k: 2 })), vec![1, 3, 5, 7]);
    }

    #[test]
    fn last_k_places_final_layers() {
        assert_eq!(moe_indices(&cfg(8, MoePlacement::LastK { k: 2 })), vec![6, 7]);
    }

    #[test]
    fn invalid_placements() {
        assert!(cfg(2, MoePlacement::EveryK { k: 4 }).validate().is_err());
        assert!(cfg(2, MoePlacement::LastK { k: 0 }).validate().is_err());
        let mut c = cfg(2, MoePlacement::None);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dense_counts_are_equal() {
        let c = count_params(&cfg(4, MoePlacement::None));
        assert_eq!(c.total, c.activated);
    }

    #[test]
    fn one_moe_layer_difference_is_two_experts() {
        let c = cfg(4, MoePlacement::EveryK { k: 4 });
        let n = count_params(&c);
        assert_eq!(n.total - n.activated, 2 * (2 * 8 * 16));
    }

    #[test]
    fn placement_serde() {
        let p: MoePlacement = serde_json::from_str(r#"{"kind":"every-k","k":4}"#).unwrap();
        assert_eq!(p, MoePlacement::EveryK { k: 4 });
        let n: MoePlacement = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert_eq!(n, MoePlacement::None);
    }
}
