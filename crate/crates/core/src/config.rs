//! Model and engine configuration, loadable from a flat TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    /// Query/key width per attention head.
    pub d_qk: usize,
    /// Value width per attention head; `num_attn_heads * d_v == d_model`.
    pub d_v: usize,
    pub num_attn_heads: usize,
    pub vq_heads: usize,
    #[serde(default = "default_entries")]
    pub vq_entries_per_head: usize,
    /// Hidden width of the MLP. Zero removes the MLP sub-block.
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_pool_factor")]
    pub position_pool_factor: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn default_entries() -> usize {
    64
}

fn default_pool_factor() -> usize {
    100
}

impl ModelConfig {
    /// The configuration used by the benchmarks.
    pub fn desk() -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 64,
            d_qk: 16,
            d_v: 16,
            num_attn_heads: 4,
            vq_heads: 2,
            vq_entries_per_head: 64,
            d_mlp: 256,
            vocab_size: 512,
            max_seq_len: 512,
            position_pool_factor: 100,
            precision: Precision::Single,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_qk", self.d_qk),
            ("d_v", self.d_v),
            ("num_attn_heads", self.num_attn_heads),
            ("vq_heads", self.vq_heads),
            ("vq_entries_per_head", self.vq_entries_per_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("position_pool_factor", self.position_pool_factor),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.num_attn_heads != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be divisible by num_attn_heads".into(),
            ));
        }
        if self.d_model % self.vq_heads != 0 {
            return Err(Error::InvalidConfig("d_model must be divisible by vq_heads".into()));
        }
        if self.num_attn_heads * self.d_v != self.d_model {
            return Err(Error::InvalidConfig(
                "num_attn_heads * d_v must equal d_model".into(),
            ));
        }
        if self.vq_entries_per_head > usize::from(u16::MAX) {
            return Err(Error::InvalidConfig("vq_entries_per_head too large".into()));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.position_pool_factor * self.max_seq_len
    }

    pub fn vq_chunk(&self) -> usize {
        self.d_model / self.vq_heads
    }

    /// Stable short identifier for reports.
    pub fn fingerprint(&self) -> String {
        format!(
            "L{}-d{}-qk{}-v{}-a{}-h{}-m{}-f{}-n{}-G{}-{}",
            self.num_layers,
            self.d_model,
            self.d_qk,
            self.d_v,
            self.num_attn_heads,
            self.vq_heads,
            self.vq_entries_per_head,
            self.d_mlp,
            self.max_seq_len,
            self.position_pool_factor,
            self.precision
        )
    }
}

/// Dense baseline used as the numerator of speedup ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    Gelu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineOptions {
    /// A batch row whose delta set exceeds this fraction of the sequence is
    /// recomputed row by row instead of corrected.
    #[serde(default = "default_full_row_fraction")]
    pub full_row_fraction: f64,
    /// Relative score margin below which a corrected quantization is
    /// re-derived from an exactly materialized attention row. `None` picks
    /// the precision default.
    #[serde(default)]
    pub near_tie_guard: Option<f64>,
    /// Keep the base attention matrix in memory; when false the needed
    /// entries are recomputed on demand.
    #[serde(default = "default_true")]
    pub store_attention_matrix: bool,
    #[serde(default)]
    pub baseline: Baseline,
}

fn default_full_row_fraction() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            full_row_fraction: default_full_row_fraction(),
            near_tie_guard: None,
            store_attention_matrix: true,
            baseline: Baseline::Gelu,
        }
    }
}

impl EngineOptions {
    pub fn tie_guard(&self, precision: Precision) -> f64 {
        self.near_tie_guard.unwrap_or(match precision {
            Precision::Single => 1e-4,
            Precision::Double => 1e-9,
        })
    }
}

/// Contents of a run configuration file: model fields, seed and thresholds
/// side by side at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub engine: EngineOptions,
    /// Documents used to fit the VQ codebooks.
    #[serde(default = "default_calibration_docs")]
    pub calibration_docs: usize,
}

fn default_calibration_docs() -> usize {
    4
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            model: ModelConfig::desk(),
            engine: EngineOptions::default(),
            calibration_docs: default_calibration_docs(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.model.validate()?;
        if !(cfg.engine.full_row_fraction > 0.0) {
            return Err(Error::InvalidConfig("full_row_fraction must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn sample_file_is_the_default_run() {
        let run = RunConfig::from_toml_str(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(run, RunConfig::default());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::desk();
        c.vq_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parses_flat_toml() {
        let text = r#"
seed = 3
num_layers = 1
d_model = 8
d_qk = 4
d_v = 4
num_attn_heads = 2
vq_heads = 2
vq_entries_per_head = 4
d_mlp = 0
vocab_size = 10
max_seq_len = 16
precision = "double"

[engine]
full_row_fraction = 0.5
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.position_pool_factor, 100);
        assert_eq!(cfg.model.precision, Precision::Double);
        assert_eq!(cfg.engine.full_row_fraction, 0.5);
        assert!(cfg.engine.store_attention_matrix);
    }
}
