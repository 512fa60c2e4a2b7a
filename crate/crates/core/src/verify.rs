//! Verification suites run by `vqt verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_base, vq_via_linearity, DeltaSet, LinearityOptions};
use crate::bench::{bench_offline, bench_online, median, read_csv, slope, spearman, write_csv, OnlineRow};
use crate::compressed::{compress, decompress, CompressedTensor};
use crate::config::{EngineOptions, ModelConfig, RunConfig};
use crate::engine::{open_session, Document, EditOp};
use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::model::{dense_forward, gelu_attention, ModelParams, VqCodebook};
use crate::positions::{Allocation, PositionMap};
use crate::scalar::{max_abs_diff, Precision, Scalar};
use crate::workload::{gen_pairs, gen_workload, EditMix, RevisionStream, Vocabulary};

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub precision: Precision,
    pub trials: usize,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub trials: usize,
    pub precision: Precision,
    /// Perturb one codebook bias of the configured model before running.
    pub corrupt_bias: bool,
}

/// Max-abs tolerance between incremental and dense outputs.
pub fn tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::Single => 1e-5,
        Precision::Double => 1e-10,
    }
}

pub fn verify(run: &RunConfig, options: &VerifyOptions) -> Result<VerifyReport> {
    if options.trials == 0 {
        return Err(Error::InvalidValue("trials must be at least 1"));
    }
    match options.precision {
        Precision::Single => verify_with::<f32>(run, options),
        Precision::Double => verify_with::<f64>(run, options),
    }
}

fn suite(name: &'static str, result: Result<(bool, String)>) -> SuiteResult {
    match result {
        Ok((passed, detail)) => SuiteResult { name, passed, detail },
        Err(e) => SuiteResult { name, passed: false, detail: e.to_string() },
    }
}

fn verify_with<T: Scalar>(run: &RunConfig, options: &VerifyOptions) -> Result<VerifyReport> {
    let mut model = run.model.clone();
    model.precision = options.precision;
    let mut params = ModelParams::<T>::calibrated(&model, run.seed, run.calibration_docs)?;
    if options.corrupt_bias {
        let cb = &mut params.layers[0].codebook;
        let b = cb.bias(0, 0);
        cb.corrupt_bias(0, 0, b + T::one());
    }
    let suites = vec![
        suite("vq-bias", vq_bias(&params)),
        suite("oracle-equivalence", oracle_equivalence::<T>(run.seed, options.trials, options.precision)),
        suite("index-agreement", index_agreement(run.seed, options.trials)),
        suite("complexity-slope", complexity_slope(&params, &run.engine, run.seed)),
        suite("format", format_properties(&params, &run.engine, run.seed)),
    ];
    Ok(VerifyReport { precision: options.precision, trials: options.trials, suites })
}

fn vq_bias<T: Scalar>(params: &ModelParams<T>) -> Result<(bool, String)> {
    for layer in &params.layers {
        layer.codebook.check_biases()?;
    }
    Ok((true, format!("{} codebooks consistent", params.layers.len())))
}

/// A random small model configuration.
pub fn random_config(rng: &mut ChaCha8Rng, precision: Precision) -> ModelConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d_v = [2, 4, 8][rng.random_range(0..3)];
    ModelConfig {
        num_layers: rng.random_range(1..=4),
        d_model: heads * d_v,
        d_qk: [2, 4, 8][rng.random_range(0..3)],
        d_v,
        num_attn_heads: heads,
        vq_heads: rng.random_range(1..=2),
        vq_entries_per_head: rng.random_range(1..=16),
        d_mlp: [0, 16, 32][rng.random_range(0..3)],
        vocab_size: 32,
        max_seq_len: 64,
        position_pool_factor: [2, 4, 100][rng.random_range(0..3)],
        precision,
    }
}

pub fn random_edit(rng: &mut ChaCha8Rng, len: usize, cfg: &ModelConfig) -> EditOp {
    let token = rng.random_range(0..cfg.vocab_size as u32);
    match rng.random_range(0..3) {
        0 if len < cfg.max_seq_len => EditOp::Insert { slot: rng.random_range(0..=len), token },
        1 if len > 1 => EditOp::Delete { slot: rng.random_range(0..len) },
        _ => EditOp::Replace { slot: rng.random_range(0..len), token },
    }
}

/// Random configurations and edit sequences, each output compared with a
/// dense pass over the edited document.
pub fn oracle_equivalence<T: Scalar>(seed: u64, trials: usize, precision: Precision) -> Result<(bool, String)> {
    let tol = tolerance(precision);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ac1e);
    let mut worst = 0.0f64;
    let mut edits = 0;
    for trial in 0..trials {
        let cfg = random_config(&mut rng, precision);
        let params = ModelParams::<T>::calibrated(&cfg, rng.random(), 1)?;
        let n = rng.random_range(1..=60);
        let tokens = (0..n).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let mut session = open_session(&params, Document::new(tokens, &cfg)?, EngineOptions::default())?;
        for _ in 0..5 {
            let op = random_edit(&mut rng, session.document().len(), &cfg);
            let out = session.apply_edit(op)?;
            let doc = session.document();
            let dense = dense_forward(&params, doc.tokens(), doc.positions().positions(), None, &FlopCounter::new())?;
            let dev = max_abs_diff(&out.output, &dense.output);
            worst = worst.max(dev);
            edits += 1;
            if dev > tol {
                return Ok((false, format!("trial {trial} ({}), {op}: deviation {dev:e} > {tol:e}", cfg.fingerprint())));
            }
        }
        worst = worst.max(session.replay_verify()?.max_deviation());
    }
    Ok((worst <= tol, format!("{trials} configs, {edits} edits, max deviation {worst:e}")))
}

/// Batch-of-two attention inputs whose second row differs from the first
/// at `changed`.
fn attention_case(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    n: usize,
    changed: &[usize],
) -> Result<[CompressedTensor<f64>; 3]> {
    let mut make = |dim: usize| {
        let row: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut second = row.clone();
        for &c in changed {
            for x in &mut second[c * dim..(c + 1) * dim] {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let mut dense = row;
        dense.extend(second);
        compress(&dense, 2, n, dim)
    };
    let qk = cfg.num_attn_heads * cfg.d_qk;
    Ok([make(qk)?, make(qk)?, make(cfg.d_model)?])
}

/// Dense multi-head attention of batch row `b`.
fn dense_attention(cfg: &ModelConfig, qkv: &[CompressedTensor<f64>; 3], b: usize) -> Result<Vec<f64>> {
    let n = qkv[0].seq();
    let (heads, dqk, dv, d) = (cfg.num_attn_heads, cfg.d_qk, cfg.d_v, cfg.d_model);
    let rows: Vec<Vec<f64>> = qkv.iter().map(|t| decompress(t)[b * n * t.dim()..(b + 1) * n * t.dim()].to_vec()).collect();
    let head = |x: &[f64], w: usize, off: usize, len: usize| -> Vec<f64> {
        (0..n).flat_map(|i| x[i * w + off..i * w + off + len].iter().copied()).collect()
    };
    let mut out = vec![0.0; n * d];
    for a in 0..heads {
        let o = gelu_attention(
            &head(&rows[0], heads * dqk, a * dqk, dqk),
            &head(&rows[1], heads * dqk, a * dqk, dqk),
            &head(&rows[2], d, a * dv, dv),
            n,
            dqk,
            dv,
            true,
        )?;
        for i in 0..n {
            out[i * d + a * dv..i * d + (a + 1) * dv].copy_from_slice(&o[i * dv..(i + 1) * dv]);
        }
    }
    Ok(out)
}

/// Quantization indices from corrected scores against quantization of the
/// materialized attention output, in double precision. Rows whose dense
/// margin is at most 1e-9 are counted but not required to agree.
pub fn index_agreement(seed: u64, trials: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d0c);
    let (mut checked, mut flagged, mut mismatched) = (0usize, 0usize, Vec::new());
    for trial in 0..trials {
        let cfg = random_config(&mut rng, Precision::Double);
        let n = rng.random_range(2..=32);
        let changed: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.1)).collect();
        let qkv = attention_case(&mut rng, &cfg, n, &changed)?;
        let codes = (0..cfg.d_model * cfg.vq_entries_per_head).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = VqCodebook::new(cfg.vq_heads, cfg.vq_entries_per_head, cfg.vq_chunk(), codes)?;
        let base_pads = vec![false; n];
        let pads = vec![base_pads.clone(); 2];
        let counter = FlopCounter::new();
        let cache = attention_base(&cfg, &qkv[0], &qkv[1], &qkv[2], &base_pads, Some(&cb), true, &counter)?;
        let deltas = DeltaSet::from_tensors(&qkv[0], &qkv[1], &qkv[2], &base_pads, &pads)?;
        let opts = LinearityOptions { full_row_fraction: 0.25, guard: 0.0 };
        let rows = vq_via_linearity(&cache, &qkv[0], &qkv[1], &qkv[2], &pads, &deltas, &cb, opts, &counter)?;
        for (b, row) in rows.iter().enumerate() {
            let dense = dense_attention(&cfg, &qkv, b)?;
            let tuples = row.tuples(&cache);
            let d = cfg.d_model;
            for (r, tuple) in tuples.iter().enumerate() {
                let mut s = vec![0.0; cb.scores_len()];
                cb.inner_products(&dense[r * d..(r + 1) * d], &mut s);
                let sel = cb.select(&s);
                if sel.margin > 1e-9 {
                    checked += 1;
                    if *tuple != sel.indices {
                        mismatched.push(format!("trial {trial} row {b}/{r}"));
                    }
                } else {
                    flagged += 1;
                }
            }
        }
    }
    let detail = format!("{checked} positions agree, {flagged} near ties flagged, {} mismatches", mismatched.len());
    match mismatched.first() {
        Some(first) => Ok((false, format!("{detail}; first at {first}"))),
        None => Ok((true, detail)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OfflineSweep {
    pub n: usize,
    pub edits: Vec<usize>,
    pub median_ratio: Vec<f64>,
    pub spearman: Option<f64>,
    pub log_log_slope: Option<f64>,
}

impl OfflineSweep {
    pub fn passes(&self) -> bool {
        self.spearman.is_some_and(|r| r < -0.8) && self.log_log_slope.is_some_and(|s| (s + 1.0).abs() <= 0.3)
    }
}

/// Revision pairs at `n` tokens with `edits` replaced tokens, `per_edit`
/// pairs each.
pub fn offline_sweep<T: Scalar>(
    params: &ModelParams<T>,
    options: &EngineOptions,
    seed: u64,
    n: usize,
    edits: &[usize],
    per_edit: usize,
) -> Result<OfflineSweep> {
    let cfg = &params.config;
    let voc = Vocabulary { vocab_size: cfg.vocab_size as u32, max_len: cfg.max_seq_len };
    let stream = gen_pairs(seed, n, per_edit * edits.len(), edits, EditMix::REPLACE_ONLY, voc)?;
    let bench = bench_offline(params, options, &stream.pairs()?)?;
    let median_ratio =
        (0..edits.len()).map(|e| median(bench.rows.iter().skip(e).step_by(edits.len()).map(|r| r.ratio))).collect();
    let fractions: Vec<f64> = bench.rows.iter().map(|r| r.fraction_modified).collect();
    let ratios: Vec<f64> = bench.rows.iter().map(|r| r.ratio).collect();
    let lx: Vec<f64> = fractions.iter().map(|f| f.ln()).collect();
    let ly: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
    Ok(OfflineSweep {
        n,
        edits: edits.to_vec(),
        median_ratio,
        spearman: spearman(&ratios, &fractions),
        log_log_slope: slope(&lx, &ly),
    })
}

/// Median online ratio of single-token replace edits per document length,
/// over `docs` documents with `edits` edits each.
pub fn online_ratio_by_length<T: Scalar>(
    params: &ModelParams<T>,
    options: &EngineOptions,
    seed: u64,
    lengths: &[usize],
    docs: usize,
    edits: usize,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let voc = Vocabulary { vocab_size: cfg.vocab_size as u32, max_len: cfg.max_seq_len };
    lengths
        .iter()
        .map(|&n| {
            let mut ratios = Vec::with_capacity(docs * edits);
            for d in 0..docs {
                let stream = gen_workload(seed + d as u64, n, edits, EditMix::REPLACE_ONLY, voc)?;
                ratios.extend(bench_online(params, options, &stream, 1)?.rows.iter().map(|r| r.ratio));
            }
            Ok(median(ratios))
        })
        .collect()
}

fn complexity_slope<T: Scalar>(params: &ModelParams<T>, options: &EngineOptions, seed: u64) -> Result<(bool, String)> {
    let cfg = &params.config;
    let n = cfg.max_seq_len.min(256);
    let mut edits: Vec<usize> = [1, 4, 16, 64].iter().map(|e| (e * n / 256).max(1)).collect();
    edits.dedup();
    let sweep = offline_sweep(params, options, seed, n, &edits, 12)?;
    let lengths: Vec<usize> = [64, 128, 256, 512].into_iter().filter(|&l| l <= cfg.max_seq_len).collect();
    let online = online_ratio_by_length(params, options, seed, &lengths, 2, 50)?;
    let increasing = online.windows(2).all(|w| w[1] > w[0]);
    let detail = format!(
        "offline n={n} e={edits:?}: median ratio {:.2?}, spearman {:.3?}, slope {:.3?}; online median ratio over n={lengths:?}: {online:.2?}",
        sweep.median_ratio, sweep.spearman, sweep.log_log_slope
    );
    Ok((sweep.passes() && increasing, detail))
}

fn format_properties<T: Scalar>(params: &ModelParams<T>, options: &EngineOptions, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0);
    for _ in 0..100 {
        let (b, n, d) = (rng.random_range(1..4), rng.random_range(1..12), rng.random_range(1..6));
        let dense: Vec<T> = (0..b * n * d).map(|_| T::of(f64::from(rng.random_range(-2i8..3)))).collect();
        let ct = compress(&dense, b, n, d)?;
        if decompress(&ct) != dense || !ct.is_canonical() {
            return Ok((false, "compress round trip".into()));
        }
    }
    let cfg = &params.config;
    let voc = Vocabulary { vocab_size: cfg.vocab_size as u32, max_len: cfg.max_seq_len };
    let n = cfg.max_seq_len.min(32);
    let stream = gen_workload(seed, n, 20, EditMix::new(0.4, 0.3, 0.3)?, voc)?;
    if RevisionStream::read(stream.to_jsonl().as_bytes())? != stream {
        return Ok((false, "revision stream round trip".into()));
    }
    let rows = bench_online(params, options, &stream, 1)?.rows;
    let mut csv = Vec::new();
    write_csv(&rows, &mut csv)?;
    if read_csv::<OnlineRow>(&csv[..])? != rows {
        return Ok((false, "online csv round trip".into()));
    }
    let mut pm = PositionMap::init(n, cfg.position_pool_factor, cfg.pool_size())?;
    for _ in 0..200 {
        let slot = rng.random_range(0..=pm.len());
        if pm.len() > 1 && rng.random_bool(0.3) {
            pm.delete(slot.min(pm.len() - 1))?;
        } else if pm.len() < cfg.max_seq_len && pm.insert(slot)? == Allocation::ReindexNeeded {
            let _ = pm.insert_reindexed(slot)?;
        }
        pm.check()?;
    }
    Ok((true, "compression, stream, csv and position invariants hold".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_configs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let cfg = random_config(&mut rng, Precision::Double);
            cfg.validate().unwrap();
            assert!(cfg.d_model <= 32 && cfg.num_layers <= 4 && cfg.vq_entries_per_head <= 16);
        }
    }

    #[test]
    fn small_oracle_and_index_runs() {
        assert!(oracle_equivalence::<f64>(3, 4, Precision::Double).unwrap().0);
        assert!(index_agreement(3, 10).unwrap().0);
    }

    #[test]
    fn corrupted_bias_is_named() {
        let cfg = ModelConfig { max_seq_len: 16, vocab_size: 16, ..ModelConfig::desk() };
        let mut params = ModelParams::<f64>::random(&cfg, 1).unwrap();
        assert!(vq_bias(&params).unwrap().0);
        params.layers[1].codebook.corrupt_bias(1, 3, 0.5);
        let err = vq_bias(&params).unwrap_err().to_string();
        assert!(err.contains("vq-bias"), "{err}");
    }
}
