use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub encoding_layers: usize,
    pub thinking_layers: usize,
    pub decoding_layers: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::corpus::VOCAB_SIZE,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_layers: 8,
            encoding_layers: 0,
            thinking_layers: 6,
            decoding_layers: 2,
            max_seq_len: 256,
            norm_eps: 1e-6,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration with an `E{enc}T{think}D{dec}` split.
    pub fn tiny(d_model: usize, enc: usize, think: usize, dec: usize) -> Self {
        ModelConfig {
            d_model,
            n_heads: 4,
            d_ff: 2 * d_model,
            n_layers: enc + think + dec,
            encoding_layers: enc,
            thinking_layers: think,
            decoding_layers: dec,
            max_seq_len: 64,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.encoding_layers + self.thinking_layers + self.decoding_layers != self.n_layers {
            return Err(Error::config(format!(
                "layer partition E{}T{}D{} does not sum to n_layers = {}",
                self.encoding_layers, self.thinking_layers, self.decoding_layers, self.n_layers
            )));
        }
        if self.decoding_layers == 0 {
            return Err(Error::config("model.decoding_layers must be at least 1"));
        }
        if self.d_model % self.n_heads != 0 || (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::config("model.norm_eps must be a small positive number"));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::config("model.rope_base must be positive"));
        }
        crate::error::check_seed("model.seed", self.seed)
    }

    pub fn partition(&self) -> LayerPartition {
        let e = self.encoding_layers;
        let t = e + self.thinking_layers;
        LayerPartition {
            encoding: 0..e,
            thinking: e..t,
            decoding: t..self.n_layers,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The three partition ranges of the layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoding,
    Thinking,
    Decoding,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Encoding, Stage::Thinking, Stage::Decoding];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Encoding => "encoding",
            Stage::Thinking => "thinking",
            Stage::Decoding => "decoding",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPartition {
    pub encoding: Range<usize>,
    pub thinking: Range<usize>,
    pub decoding: Range<usize>,
}

impl LayerPartition {
    pub fn range(&self, stage: Stage) -> Range<usize> {
        match stage {
            Stage::Encoding => self.encoding.clone(),
            Stage::Thinking => self.thinking.clone(),
            Stage::Decoding => self.decoding.clone(),
        }
    }

    pub fn total(&self) -> usize {
        self.decoding.end
    }

    pub fn stage_of(&self, layer: usize) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| self.range(*s).contains(&layer))
    }

    /// Layers run before the decoding range: encoding followed by thinking.
    pub fn upper(&self) -> Range<usize> {
        self.encoding.start..self.thinking.end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_ranges() {
        let c = ModelConfig::tiny(32, 3, 3, 2);
        c.validate().unwrap();
        let p = c.partition();
        assert_eq!(p.encoding, 0..3);
        assert_eq!(p.thinking, 3..6);
        assert_eq!(p.decoding, 6..8);
        assert_eq!(p.stage_of(5), Some(Stage::Thinking));
        assert_eq!(p.stage_of(8), None);
    }

    #[test]
    fn rejects_bad_partitions() {
        let mut c = ModelConfig::tiny(32, 3, 5, 0);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = ModelConfig::tiny(32, 3, 3, 2);
        c.n_layers = 9;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = ModelConfig::tiny(32, 0, 2, 2);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }
}
