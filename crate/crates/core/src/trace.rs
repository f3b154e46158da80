use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AttentionMatrix;
use crate::numeric::Matrix;

/// Attention matrices and hidden states captured during one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub model_name: String,
    /// `[layer][head]`.
    pub attentions: Vec<Vec<AttentionMatrix>>,
    /// Post-layer token representations, one per layer.
    pub hidden_states: Vec<Matrix>,
    pub tokens: Vec<String>,
    pub common_positions: Vec<usize>,
}

impl AttentionTrace {
    pub fn layer_count(&self) -> usize {
        self.attentions.len()
    }

    pub fn head_count(&self) -> usize {
        self.attentions.first().map_or(0, Vec::len)
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Checks that layer/head counts and token counts agree everywhere.
    pub fn validate(&self) -> Result<()> {
        let n = self.token_count();
        let heads = self.head_count();
        for (l, layer) in self.attentions.iter().enumerate() {
            if layer.len() != heads {
                return Err(Error::Schema(format!(
                    "layer {l} has {} heads, expected {heads}",
                    layer.len()
                )));
            }
            for (h, a) in layer.iter().enumerate() {
                if a.n() != n {
                    return Err(Error::Schema(format!(
                        "layer {l} head {h} has n = {}, expected {n}",
                        a.n()
                    )));
                }
            }
        }
        if !self.hidden_states.is_empty() && self.hidden_states.len() != self.layer_count() {
            return Err(Error::Schema(format!(
                "{} hidden-state matrices for {} layers",
                self.hidden_states.len(),
                self.layer_count()
            )));
        }
        for (l, h) in self.hidden_states.iter().enumerate() {
            if h.rows() != n {
                return Err(Error::Schema(format!(
                    "hidden state {l} has {} rows, expected {n}",
                    h.rows()
                )));
            }
        }
        if let Some(&p) = self.common_positions.iter().find(|&&p| p >= n) {
            return Err(Error::Schema(format!(
                "common position {p} out of range for {n} tokens"
            )));
        }
        Ok(())
    }
}
