//! Arithmetic-operation accounting.
//!
//! A multiply-add counts as two operations. Index comparisons, hashing and
//! table lookups are charged to [`Category::Bookkeeping`], which is reported
//! but never enters a speedup ratio.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{Baseline, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    AttentionBase,
    AttentionDelta,
    PerLocation,
    BinaryElementwise,
    VqScores,
    ReindexRecompute,
    Bookkeeping,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::AttentionBase,
        Category::AttentionDelta,
        Category::PerLocation,
        Category::BinaryElementwise,
        Category::VqScores,
        Category::ReindexRecompute,
        Category::Bookkeeping,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::AttentionBase => "attention-base",
            Category::AttentionDelta => "attention-delta",
            Category::PerLocation => "per-location",
            Category::BinaryElementwise => "binary-elementwise",
            Category::VqScores => "vq-scores",
            Category::ReindexRecompute => "reindex-recompute",
            Category::Bookkeeping => "bookkeeping-comparisons",
        }
    }
}

/// Per-category operation counters. Charging goes through a shared
/// reference so kernels can take `&FlopCounter` alongside borrowed state.
#[derive(Debug, Default)]
pub struct FlopCounter {
    counts: [Cell<u64>; 7],
    redirect: Cell<Option<Category>>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, category: Category, ops: u64) {
        // Bookkeeping stays bookkeeping even inside a redirected scope.
        let category = match (self.redirect.get(), category) {
            (_, Category::Bookkeeping) | (None, _) => category,
            (Some(target), _) => target,
        };
        let cell = &self.counts[category.slot()];
        cell.set(cell.get() + ops);
    }

    pub fn get(&self, category: Category) -> u64 {
        self.counts[category.slot()].get()
    }

    pub fn tally(&self) -> FlopTally {
        let mut counts = [0u64; 7];
        for (c, cell) in counts.iter_mut().zip(&self.counts) {
            *c = cell.get();
        }
        FlopTally { counts }
    }

    pub fn reset(&self) {
        for c in &self.counts {
            c.set(0);
        }
    }

    /// Runs `f` with every arithmetic charge booked under `target`.
    pub fn redirected<R>(&self, target: Category, f: impl FnOnce() -> R) -> R {
        let previous = self.redirect.replace(Some(target));
        let out = f();
        self.redirect.set(previous);
        out
    }

    /// Runs `f` and returns what it charged.
    pub fn scoped<R>(&self, f: impl FnOnce() -> R) -> (R, FlopTally) {
        let before = self.tally();
        let out = f();
        (out, self.tally().since(&before))
    }
}

/// Immutable snapshot of counter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopTally {
    counts: [u64; 7],
}

impl FlopTally {
    pub fn get(&self, category: Category) -> u64 {
        self.counts[category.slot()]
    }

    /// All arithmetic categories; excludes bookkeeping.
    pub fn arithmetic(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| **c != Category::Bookkeeping)
            .map(|c| self.get(*c))
            .sum()
    }

    pub fn since(&self, earlier: &FlopTally) -> FlopTally {
        let mut counts = [0u64; 7];
        for (i, c) in counts.iter_mut().enumerate() {
            *c = self.counts[i] - earlier.counts[i];
        }
        FlopTally { counts }
    }

    pub fn plus(&self, other: &FlopTally) -> FlopTally {
        let mut counts = self.counts;
        for (c, o) in counts.iter_mut().zip(other.counts) {
            *c += o;
        }
        FlopTally { counts }
    }
}

impl fmt::Display for FlopTally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Category::ALL
            .iter()
            .map(|c| format!("{}={}", c.name(), self.get(*c)))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

/// Exact per-vector costs of the kernels in [`crate::nn`].
pub mod cost {
    pub fn layer_norm(d: usize) -> u64 {
        8 * d as u64 + 5
    }

    pub fn affine(input: usize, output: usize) -> u64 {
        2 * (input * output) as u64
    }

    pub fn gelu(d: usize) -> u64 {
        9 * d as u64
    }

    pub fn add(d: usize) -> u64 {
        d as u64
    }

    /// One attention-matrix entry: dot product, scaling and GELU.
    pub fn attention_entry(d_qk: usize) -> u64 {
        2 * d_qk as u64 + 10
    }

    /// Softmax-normalized entry: dot, scale, exp, running sum, normalize.
    pub fn softmax_entry(d_qk: usize) -> u64 {
        2 * d_qk as u64 + 4
    }

    /// Accumulating one weighted value vector.
    pub fn value_accumulate(d_v: usize) -> u64 {
        2 * d_v as u64
    }

    /// Inner products of one `d`-vector against `m` codes in each of `h`
    /// chunks, plus the bias terms.
    pub fn vq_scores(d: usize, heads: usize, entries: usize) -> u64 {
        (entries * (2 * d + heads)) as u64
    }
}

/// Closed-form operation count of the dense OPT-style forward pass (no VQ,
/// GELU or softmax attention, causal triangle only, embeddings excluded).
pub fn dense_reference_flops(cfg: &ModelConfig, batch: usize, seq: usize, baseline: Baseline) -> u64 {
    let d = cfg.d_model;
    let heads = cfg.num_attn_heads;
    let qk = heads * cfg.d_qk;
    let mut per_position = cost::layer_norm(d)
        + 2 * cost::affine(d, qk)
        + cost::affine(d, heads * cfg.d_v)
        + cost::affine(heads * cfg.d_v, d)
        + cost::add(d);
    if cfg.d_mlp > 0 {
        per_position += cost::layer_norm(d)
            + cost::affine(d, cfg.d_mlp)
            + cost::gelu(cfg.d_mlp)
            + cost::affine(cfg.d_mlp, d)
            + cost::add(d);
    }
    let entry = match baseline {
        Baseline::Gelu => cost::attention_entry(cfg.d_qk),
        Baseline::Softmax => cost::softmax_entry(cfg.d_qk),
    };
    let pairs = (seq * (seq + 1) / 2) as u64;
    let attention = pairs * heads as u64 * (entry + cost::value_accumulate(cfg.d_v));
    let per_layer = seq as u64 * per_position + attention;
    batch as u64 * cfg.num_layers as u64 * per_layer
}

/// Operations of one dense VQ-Transformer forward pass beyond the reference:
/// the quantization scoring of every position.
pub fn dense_vq_flops(cfg: &ModelConfig, batch: usize, seq: usize) -> u64 {
    (batch * seq * cfg.num_layers) as u64 * cost::vq_scores(cfg.d_model, cfg.vq_heads, cfg.vq_entries_per_head)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub dense_flops: u64,
    pub incremental_flops: u64,
    pub ratio: f64,
    pub fraction_modified: f64,
    pub edit: String,
    pub config: String,
    pub bookkeeping: u64,
}

/// Builds a report from a closed scope. A scope that charged nothing is
/// treated as one operation so the ratio stays finite.
pub fn report(scope: &FlopTally, dense_baseline: u64, fraction_modified: f64, edit: &str, config: &ModelConfig) -> SpeedupReport {
    let incremental = scope.arithmetic();
    SpeedupReport {
        dense_flops: dense_baseline,
        incremental_flops: incremental,
        ratio: dense_baseline as f64 / incremental.max(1) as f64,
        fraction_modified,
        edit: edit.to_string(),
        config: config.fingerprint(),
        bookkeeping: scope.get(Category::Bookkeeping),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_sequence_more_than_doubles_cost() {
        let cfg = ModelConfig::desk();
        let a = dense_reference_flops(&cfg, 1, 128, Baseline::Gelu);
        let b = dense_reference_flops(&cfg, 1, 256, Baseline::Gelu);
        assert!(b > 2 * a);
    }

    #[test]
    fn linear_in_batch() {
        let cfg = ModelConfig::desk();
        assert_eq!(
            dense_reference_flops(&cfg, 2, 100, Baseline::Gelu),
            2 * dense_reference_flops(&cfg, 1, 100, Baseline::Gelu)
        );
    }

    #[test]
    fn attention_only_hand_formula() {
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 8,
            d_qk: 3,
            d_v: 4,
            num_attn_heads: 2,
            vq_heads: 2,
            vq_entries_per_head: 4,
            d_mlp: 0,
            vocab_size: 10,
            max_seq_len: 16,
            position_pool_factor: 10,
            precision: Default::default(),
        };
        let n = 5u64;
        // Layer norm: 8*8+5 = 69. Q and K: 2*(2*8*6) = 192. V: 2*8*8 = 128.
        // Output projection: 128. Residual: 8. Per position 525.
        // Attention: 15 causal pairs * 2 heads * ((2*3+10) + 2*4) = 720.
        let hand = n * 525 + 720;
        assert_eq!(dense_reference_flops(&cfg, 1, n as usize, Baseline::Gelu), hand);
    }

    #[test]
    fn report_ratio_identity() {
        let counter = FlopCounter::new();
        counter.charge(Category::PerLocation, 1000);
        counter.charge(Category::Bookkeeping, 55);
        let r = report(&counter.tally(), 1000, 0.5, "x", &ModelConfig::desk());
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.bookkeeping, 55);
    }

    #[test]
    fn redirect_keeps_bookkeeping_separate() {
        let c = FlopCounter::new();
        c.redirected(Category::ReindexRecompute, || {
            c.charge(Category::PerLocation, 10);
            c.charge(Category::Bookkeeping, 3);
        });
        assert_eq!(c.get(Category::ReindexRecompute), 10);
        assert_eq!(c.get(Category::PerLocation), 0);
        assert_eq!(c.get(Category::Bookkeeping), 3);
        let ((), scope) = c.scoped(|| c.charge(Category::VqScores, 4));
        assert_eq!(scope.arithmetic(), 4);
    }
}
