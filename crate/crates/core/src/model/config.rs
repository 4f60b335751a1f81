use serde::{Deserialize, Serialize};

use crate::moe::{MoEConfig, Variant};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub moe: MoEConfig,
    /// Blocks whose FFN is sparse; `None` means every block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moe_layer_indices: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            n_layers: 4,
            vocab_size: 256,
            seq_len: 256,
            moe: MoEConfig::default(),
            moe_layer_indices: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.vocab_size == 0 {
            return bad("d_model, n_heads, n_layers and vocab_size must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model={} must equal n_heads·d_head = {}·{}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if let Some(ix) = &self.moe_layer_indices {
            if let Some(&l) = ix.iter().find(|&&l| l >= self.n_layers) {
                return bad(format!("moe layer index {l} outside 0..{}", self.n_layers));
            }
        }
        self.moe.validate()
    }

    /// Whether block `l` uses the sparse FFN.
    pub fn is_moe_layer(&self, l: usize) -> bool {
        if self.moe.is_dense() {
            return false;
        }
        match &self.moe_layer_indices {
            None => true,
            Some(ix) => ix.contains(&l),
        }
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&l| self.is_moe_layer(l)).collect()
    }

    /// Hidden width of the dense FFN in non-sparse blocks.
    pub fn dense_hidden(&self) -> usize {
        self.moe.dense_matched().expert_dim
    }

    /// Same backbone with every block dense at matched active width.
    pub fn dense_matched(&self) -> ModelConfig {
        ModelConfig { moe: self.moe.dense_matched(), moe_layer_indices: None, ..self.clone() }
    }

    pub fn with_variant(&self, variant: Variant) -> ModelConfig {
        let mut moe = self.moe.clone();
        moe.variant = variant;
        if variant.is_shared() && moe.n_shared == 0 {
            moe.n_shared = 1;
        }
        if !variant.is_shared() {
            moe.n_shared = 0;
        }
        ModelConfig { moe, ..self.clone() }
    }
}
