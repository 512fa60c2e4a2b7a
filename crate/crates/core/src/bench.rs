//! Online and offline benchmarks over revision streams, with CSV and JSON
//! output.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::EngineOptions;
use crate::engine::{open_session, process_offline, Document, EditOp};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::workload::{Record, RevisionStream};

/// One applied update of an online stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRow {
    pub edit_index: usize,
    pub edit_type: String,
    pub slot: usize,
    pub fraction_modified: f64,
    pub dense_flops: u64,
    pub incremental_flops: u64,
    pub ratio: f64,
    pub reindex_flag: bool,
    pub max_margin_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub updates: usize,
    pub median_ratio: f64,
    pub reindex_events: usize,
    pub margin_warnings: usize,
    pub dense_flops: u64,
    pub incremental_flops: u64,
    /// Summed dense cost over summed incremental cost, reindexing included.
    pub aggregate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineBench {
    pub config: String,
    pub rows: Vec<OnlineRow>,
    pub summary: OnlineSummary,
}

/// Replays `stream` through an editing session, `batch` edits per update.
/// A later revision record reopens the session on that revision.
pub fn bench_online<T: Scalar>(
    params: &ModelParams<T>,
    options: &EngineOptions,
    stream: &RevisionStream,
    batch: usize,
) -> Result<OnlineBench> {
    if batch == 0 {
        return Err(Error::InvalidValue("batch must be at least 1"));
    }
    let cfg = &params.config;
    let mut rows = Vec::new();
    let mut session = None;
    let mut pending: Vec<(usize, EditOp)> = Vec::new();
    let mut edit_index = 0;
    let mut flush = |session: &mut Option<crate::engine::EditSession<'_, T>>,
                     pending: &mut Vec<(usize, EditOp)>|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let s = session.as_mut().expect("stream opens with a revision");
        let ops: Vec<EditOp> = pending.iter().map(|p| p.1).collect();
        let out = s.apply_edits(&ops)?;
        let mut kinds: Vec<&str> = ops.iter().map(EditOp::kind).collect();
        kinds.dedup();
        rows.push(OnlineRow {
            edit_index: pending[0].0,
            edit_type: kinds.join("+"),
            slot: ops[0].slot(),
            fraction_modified: out.report.fraction_modified,
            dense_flops: out.report.dense_flops,
            incremental_flops: out.report.incremental_flops,
            ratio: out.report.ratio,
            reindex_flag: out.reindexed,
            max_margin_warning: out.margin_warning,
        });
        pending.clear();
        Ok(())
    };
    for record in stream.records() {
        match record {
            Record::Revision { tokens, .. } => {
                flush(&mut session, &mut pending)?;
                session = Some(open_session(params, Document::new(tokens.clone(), cfg)?, options.clone())?);
            }
            edit => {
                pending.push((edit_index, edit.edit().expect("edit record")));
                edit_index += 1;
                if pending.len() == batch {
                    flush(&mut session, &mut pending)?;
                }
            }
        }
    }
    flush(&mut session, &mut pending)?;
    let dense: u64 = rows.iter().map(|r| r.dense_flops).sum();
    let inc: u64 = rows.iter().map(|r| r.incremental_flops).sum();
    let summary = OnlineSummary {
        updates: rows.len(),
        median_ratio: median(rows.iter().map(|r| r.ratio)),
        reindex_events: rows.iter().filter(|r| r.reindex_flag).count(),
        margin_warnings: rows.iter().filter(|r| r.max_margin_warning).count(),
        dense_flops: dense,
        incremental_flops: inc,
        aggregate_ratio: dense as f64 / inc.max(1) as f64,
    };
    Ok(OnlineBench { config: cfg.fingerprint(), rows, summary })
}

/// One revision pair. `dense_flops` is a dense pass over the second
/// revision and `incremental_flops` the cost of processing it against the
/// first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRow {
    pub pair_index: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub lcs: usize,
    pub fraction_modified: f64,
    pub dense_flops: u64,
    pub incremental_flops: u64,
    pub ratio: f64,
}

/// Whole-batch accounting of one pair: both dense passes against the base
/// pass plus the incremental pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCost {
    pub pair_index: usize,
    pub dense_flops: u64,
    pub incremental_flops: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub pairs: usize,
    pub median_ratio: f64,
    /// Rank correlation of ratio with fraction_modified.
    pub spearman: Option<f64>,
    /// Least-squares slope of log ratio against log fraction_modified, over
    /// pairs that differ.
    pub log_log_slope: Option<f64>,
    pub median_batch_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineBench {
    pub config: String,
    pub rows: Vec<OfflineRow>,
    pub batch: Vec<BatchCost>,
    pub summary: OfflineSummary,
}

pub fn bench_offline<T: Scalar>(
    params: &ModelParams<T>,
    options: &EngineOptions,
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<OfflineBench> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut batch = Vec::with_capacity(pairs.len());
    for (i, (a, b)) in pairs.iter().enumerate() {
        let out = process_offline(params, a, b, options)?;
        rows.push(OfflineRow {
            pair_index: i,
            n_a: a.len(),
            n_b: b.len(),
            lcs: out.alignment.lcs,
            fraction_modified: out.report.fraction_modified,
            dense_flops: out.report.dense_flops,
            incremental_flops: out.report.incremental_flops,
            ratio: out.report.ratio,
        });
        let spent = out.base_tally.plus(&out.delta_tally).arithmetic();
        batch.push(BatchCost {
            pair_index: i,
            dense_flops: out.batch_dense_flops,
            incremental_flops: spent,
            ratio: out.batch_ratio(),
        });
    }
    let fractions: Vec<f64> = rows.iter().map(|r| r.fraction_modified).collect();
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        rows.iter().filter(|r| r.fraction_modified > 0.0).map(|r| (r.fraction_modified.ln(), r.ratio.ln())).unzip();
    let summary = OfflineSummary {
        pairs: rows.len(),
        median_ratio: median(ratios.iter().copied()),
        spearman: spearman(&ratios, &fractions),
        log_log_slope: slope(&lx, &ly),
        median_batch_ratio: median(batch.iter().map(|b| b.ratio)),
    };
    Ok(OfflineBench { config: params.config.fingerprint(), rows, batch, summary })
}

pub fn write_csv<R: Serialize>(rows: &[R], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: serde::de::DeserializeOwned>(input: impl std::io::Read) -> Result<Vec<R>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// NaN for an empty input.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Spearman rank correlation; `None` with fewer than two points or a
/// constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median([3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median([]).is_nan());
    }

    #[test]
    fn spearman_against_textbook_values() {
        // d² = 0+1+1+0+0 → ρ = 1 − 6·2/(5·24) = 0.9
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [10.0, 30.0, 20.0, 40.0, 50.0];
        assert!((spearman(&x, &y).unwrap() - 0.9).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&x, &[1.0; 5]).is_none());
    }

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| (3.0 / v).ln()).collect();
        assert!((slope(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![OfflineRow {
            pair_index: 0,
            n_a: 3,
            n_b: 4,
            lcs: 3,
            fraction_modified: 1.0 / 7.0,
            dense_flops: 100,
            incremental_flops: 7,
            ratio: 100.0 / 7.0,
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("pair_index,n_a,n_b,lcs,fraction_modified,dense_flops,incremental_flops,ratio\n"));
        assert_eq!(read_csv::<OfflineRow>(&buf[..]).unwrap(), rows);
    }
}
