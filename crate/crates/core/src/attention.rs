//! Delta self-attention over compressed Q/K/V.
//!
//! The base cache holds the attention matrix and outputs for the base index
//! assignment. A batch row that differs from the base at columns `S` only
//! needs the rows in `S` recomputed in full; every other row `n` is the base
//! row plus one correction per `i ∈ S, i ≤ n`. Quantization runs through the
//! same structure on codebook score vectors instead of value vectors.

use std::collections::HashMap;

use crate::compressed::CompressedTensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flops::{cost, Category, FlopCounter};
use crate::model::{attention_row, attention_weight, VqCodebook};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct Dims {
    d: usize,
    heads: usize,
    d_qk: usize,
    d_v: usize,
}

impl Dims {
    fn of(cfg: &ModelConfig) -> Self {
        Dims { d: cfg.d_model, heads: cfg.num_attn_heads, d_qk: cfg.d_qk, d_v: cfg.d_v }
    }

    fn qk(&self, a: usize) -> std::ops::Range<usize> {
        a * self.d_qk..(a + 1) * self.d_qk
    }

    fn v(&self, a: usize) -> std::ops::Range<usize> {
        a * self.d_v..(a + 1) * self.d_v
    }

    fn entry(&self) -> u64 {
        cost::attention_entry(self.d_qk)
    }

    fn accumulate(&self) -> u64 {
        cost::value_accumulate(self.d_v)
    }
}

/// Attention state of the base index assignment.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    dims: Dims,
    scale: T,
    pads: Vec<bool>,
    /// `[head][row]`, causal rows of length `row + 1`.
    weights: Option<Vec<Vec<Vec<T>>>>,
    output: Vec<T>,
    scores: Vec<Vec<T>>,
    tuples: Vec<Vec<u16>>,
    /// Corrections applied to each score row since it was last computed
    /// from a materialized output.
    age: Vec<u32>,
    /// False once a commit has replaced rows without materializing outputs.
    outputs_current: bool,
}

impl<T: Scalar> AttentionCache<T> {
    pub fn len(&self) -> usize {
        self.pads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pads.is_empty()
    }

    pub fn pads(&self) -> &[bool] {
        &self.pads
    }

    pub fn stores_weights(&self) -> bool {
        self.weights.is_some()
    }

    /// Stored base weight, zero where masked.
    pub fn stored_weight(&self, head: usize, row: usize, col: usize) -> Option<T> {
        if col > row {
            return Some(T::zero());
        }
        self.weights.as_ref().map(|w| w[head][row][col])
    }

    /// Pre-quantization output row.
    pub fn output_row(&self, row: usize) -> &[T] {
        &self.output[row * self.dims.d..(row + 1) * self.dims.d]
    }

    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn tuple(&self, row: usize) -> &[u16] {
        &self.tuples[row]
    }

    pub fn tuples(&self) -> &[Vec<u16>] {
        &self.tuples
    }

    pub fn scores(&self, row: usize) -> &[T] {
        &self.scores[row]
    }

    pub fn age(&self, row: usize) -> u32 {
        self.age[row]
    }

    fn base_weight(&self, q: &CompressedTensor<T>, k: &CompressedTensor<T>, a: usize, row: usize, col: usize, counter: &FlopCounter) -> T {
        if self.pads[row] || self.pads[col] {
            return T::zero();
        }
        if let Some(w) = self.stored_weight(a, row, col) {
            return w;
        }
        counter.charge(Category::AttentionDelta, self.dims.entry());
        let r = self.dims.qk(a);
        attention_weight(&q.code(q.base()[row])[r.clone()], &k.code(k.base()[col])[r], self.scale)
    }

    /// Inserts a masked column (and its row) before `col`.
    pub(crate) fn insert_pad(&mut self, col: usize) {
        self.pads.insert(col, true);
        if let Some(w) = self.weights.as_mut() {
            for head in w.iter_mut() {
                for row in head.iter_mut().skip(col) {
                    row.insert(col, T::zero());
                }
                head.insert(col, vec![T::zero(); col + 1]);
            }
        }
        let d = self.dims.d;
        self.output.splice(col * d..col * d, std::iter::repeat_n(T::zero(), d));
        self.scores.insert(col, Vec::new());
        let heads = self.tuples.first().map_or(0, |t| t.len());
        self.tuples.insert(col, vec![0; heads]);
        self.age.insert(col, 0);
    }

    /// Makes one quantized batch row the new base. Base outputs are not
    /// maintained past this point.
    pub(crate) fn commit_row(&mut self, lin: &LinearityRow<T>, pads: &[bool]) {
        for (r, scored) in lin.rows.iter().enumerate() {
            let n = lin.first + r;
            self.tuples[n] = scored.tuple.clone();
            self.scores[n] = scored.scores.clone();
            self.age[n] = match scored.route {
                Route::Corrected => self.age[n] + 1,
                _ => 0,
            };
            let Some(w) = self.weights.as_mut() else { continue };
            match &scored.weights {
                RowWeights::None => {
                    for head in w.iter_mut() {
                        head[n].iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                RowWeights::Full(rows) => {
                    for (head, row) in w.iter_mut().zip(rows) {
                        head[n] = row.clone();
                    }
                }
                RowWeights::Delta(per_head) => {
                    for (head, ws) in w.iter_mut().zip(per_head) {
                        for (&i, &x) in lin.delta.iter().zip(ws) {
                            head[n][i] = x;
                        }
                    }
                }
            }
        }
        if !lin.rows.is_empty() {
            self.outputs_current = false;
        }
        self.pads = pads.to_vec();
    }

    /// Drops the columns flagged in `remove`, rows and entries alike.
    pub(crate) fn remove_columns(&mut self, remove: &[bool]) {
        let keep = |i: &usize| !remove[*i];
        if let Some(w) = self.weights.as_mut() {
            for head in w.iter_mut() {
                let rows: Vec<Vec<T>> = std::mem::take(head)
                    .into_iter()
                    .enumerate()
                    .filter(|(r, _)| keep(r))
                    .map(|(_, row)| row.into_iter().enumerate().filter(|(i, _)| keep(i)).map(|(_, v)| v).collect())
                    .collect();
                *head = rows;
            }
        }
        let d = self.dims.d;
        let output: Vec<T> = (0..self.pads.len())
            .filter(keep)
            .flat_map(|r| self.output[r * d..(r + 1) * d].iter().copied())
            .collect();
        self.output = output;
        let mut i = 0;
        self.scores.retain(|_| {
            i += 1;
            !remove[i - 1]
        });
        let mut i = 0;
        self.tuples.retain(|_| {
            i += 1;
            !remove[i - 1]
        });
        let mut i = 0;
        self.age.retain(|_| {
            i += 1;
            !remove[i - 1]
        });
        let mut i = 0;
        self.pads.retain(|_| {
            i += 1;
            !remove[i - 1]
        });
    }
}

/// Per batch row, the sorted columns whose Q, K or V index or pad flag
/// differs from the base.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DeltaSet {
    pub rows: Vec<Vec<usize>>,
}

impl DeltaSet {
    pub fn from_tensors<T: Scalar>(
        q: &CompressedTensor<T>,
        k: &CompressedTensor<T>,
        v: &CompressedTensor<T>,
        base_pads: &[bool],
        pads: &[Vec<bool>],
    ) -> Result<Self> {
        let (b, n) = (q.batch(), q.seq());
        if [k.batch(), v.batch(), pads.len()] != [b, b, b]
            || [k.seq(), v.seq(), base_pads.len()] != [n, n, n]
            || pads.iter().any(|p| p.len() != n)
        {
            return Err(Error::ShapeMismatch("Q/K/V, pads and batch disagree".into()));
        }
        let rows = (0..b)
            .map(|r| {
                (0..n)
                    .filter(|&c| {
                        pads[r][c] != base_pads[c]
                            || [q, k, v].iter().any(|t| t.effective_index(r, c) != t.base()[c])
                    })
                    .collect()
            })
            .collect();
        Ok(DeltaSet { rows })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(|r| r.is_empty())
    }

    fn check<T: Scalar>(
        &self,
        q: &CompressedTensor<T>,
        k: &CompressedTensor<T>,
        v: &CompressedTensor<T>,
        base_pads: &[bool],
        pads: &[Vec<bool>],
        counter: &FlopCounter,
    ) -> Result<()> {
        let expected = DeltaSet::from_tensors(q, k, v, base_pads, pads)?;
        counter.charge(Category::Bookkeeping, (3 * q.batch() * q.seq()) as u64);
        if &expected != self {
            return Err(Error::InconsistentDelta(format!(
                "expected {:?}, got {:?}",
                expected.rows, self.rows
            )));
        }
        Ok(())
    }
}

fn check_qkv<T: Scalar>(
    dims: Dims,
    q: &CompressedTensor<T>,
    k: &CompressedTensor<T>,
    v: &CompressedTensor<T>,
    n: usize,
) -> Result<()> {
    let qk = dims.heads * dims.d_qk;
    if q.dim() != qk || k.dim() != qk || v.dim() != dims.heads * dims.d_v {
        return Err(Error::ShapeMismatch("Q/K/V widths do not match the attention heads".into()));
    }
    if q.seq() != n || k.seq() != n || v.seq() != n {
        return Err(Error::ShapeMismatch("Q/K/V lengths differ from the mask".into()));
    }
    if !q.same_structure(k) || !q.same_structure(v) {
        return Err(Error::ShapeMismatch("Q/K/V must share one index structure".into()));
    }
    Ok(())
}

/// Full attention of the base index assignment. With a codebook the base
/// quantization scores and code tuples are computed as well.
pub fn attention_base<T: Scalar>(
    cfg: &ModelConfig,
    q: &CompressedTensor<T>,
    k: &CompressedTensor<T>,
    v: &CompressedTensor<T>,
    pads: &[bool],
    codebook: Option<&VqCodebook<T>>,
    store_weights: bool,
    counter: &FlopCounter,
) -> Result<AttentionCache<T>> {
    let dims = Dims::of(cfg);
    let n = pads.len();
    check_qkv(dims, q, k, v, n)?;
    let scale = T::one() / T::of(dims.d_qk as f64).sqrt();
    let mut weights = store_weights.then(|| vec![Vec::with_capacity(n); dims.heads]);
    let mut output = vec![T::zero(); n * dims.d];
    let mut entries = 0u64;
    let mut buf = Vec::new();
    let qb = |i: usize| q.code(q.base()[i]);
    let kb = |i: usize| k.code(k.base()[i]);
    let vb = |i: usize| v.code(v.base()[i]);
    for a in 0..dims.heads {
        for row in 0..n {
            if pads[row] {
                buf.clear();
                buf.resize(row + 1, T::zero());
            } else {
                let (rq, rv) = (dims.qk(a), dims.v(a));
                entries += attention_row(
                    &qb(row)[rq.clone()],
                    row,
                    |i| &kb(i)[rq.clone()],
                    |i| &vb(i)[rv.clone()],
                    |i| pads[i],
                    scale,
                    Some(&mut buf),
                    &mut output[row * dims.d + rv.start..row * dims.d + rv.end],
                );
            }
            if let Some(w) = weights.as_mut() {
                w[a].push(buf.clone());
            }
        }
    }
    counter.charge(Category::AttentionBase, entries * (dims.entry() + dims.accumulate()));
    let mut cache = AttentionCache {
        dims,
        scale,
        pads: pads.to_vec(),
        weights,
        output,
        scores: vec![Vec::new(); n],
        tuples: vec![Vec::new(); n],
        age: vec![0; n],
        outputs_current: true,
    };
    if let Some(cb) = codebook {
        for row in 0..n {
            if pads[row] {
                cache.tuples[row] = vec![0; cb.heads()];
                continue;
            }
            let mut scores = vec![T::zero(); cb.scores_len()];
            cb.inner_products(cache.output_row(row), &mut scores);
            counter.charge(Category::VqScores, cost::vq_scores(dims.d, cb.heads(), cb.entries()));
            cache.tuples[row] = cb.select(&scores).indices;
            cache.scores[row] = scores;
        }
    }
    Ok(cache)
}

/// Attention outputs of every batch row, `n × d_model` each. Rows in the
/// delta set are recomputed in full; later rows are corrected from the base;
/// earlier rows are the base rows. A batch row whose delta set exceeds
/// `full_row_fraction · n` is recomputed entirely.
pub fn attention_delta<T: Scalar>(
    cache: &AttentionCache<T>,
    q: &CompressedTensor<T>,
    k: &CompressedTensor<T>,
    v: &CompressedTensor<T>,
    pads: &[Vec<bool>],
    deltas: &DeltaSet,
    full_row_fraction: f64,
    counter: &FlopCounter,
) -> Result<Vec<Vec<T>>> {
    let dims = cache.dims;
    let n = cache.len();
    check_qkv(dims, q, k, v, n)?;
    deltas.check(q, k, v, &cache.pads, pads, counter)?;
    if !cache.outputs_current {
        return Err(Error::Invariant { name: "attention-cache", detail: "base outputs are not materialized".into() });
    }
    let mut result = Vec::with_capacity(q.batch());
    let mut full_entries = 0u64;
    let mut computed = 0u64;
    let mut corrections = 0u64;
    for (b, s) in deltas.rows.iter().enumerate() {
        let mut out = cache.output.clone();
        let Some(&first) = s.first() else {
            result.push(out);
            continue;
        };
        let fallback = s.len() as f64 > full_row_fraction * n as f64;
        let pad = &pads[b];
        let qr = |i: usize| q.vector(b, i);
        let kr = |i: usize| k.vector(b, i);
        let vr = |i: usize| v.vector(b, i);
        for row in if fallback { 0 } else { first }..n {
            let slice = &mut out[row * dims.d..(row + 1) * dims.d];
            if pad[row] {
                slice.iter_mut().for_each(|o| *o = T::zero());
                continue;
            }
            if fallback || s.binary_search(&row).is_ok() {
                slice.iter_mut().for_each(|o| *o = T::zero());
                for a in 0..dims.heads {
                    let (rq, rv) = (dims.qk(a), dims.v(a));
                    full_entries += attention_row(
                        &qr(row)[rq.clone()],
                        row,
                        |i| &kr(i)[rq.clone()],
                        |i| &vr(i)[rv.clone()],
                        |i| pad[i],
                        cache.scale,
                        None,
                        &mut slice[rv.start..rv.end],
                    );
                }
                continue;
            }
            for a in 0..dims.heads {
                let (rq, rv) = (dims.qk(a), dims.v(a));
                for &i in s.iter().take_while(|&&i| i <= row) {
                    let a1 = if pad[i] {
                        T::zero()
                    } else {
                        computed += 1;
                        attention_weight(&qr(row)[rq.clone()], &kr(i)[rq.clone()], cache.scale)
                    };
                    let a0 = cache.base_weight(q, k, a, row, i, counter);
                    let v0 = &v.code(v.base()[i])[rv.clone()];
                    let v1 = &vr(i)[rv.clone()];
                    for (t, o) in slice[rv.clone()].iter_mut().enumerate() {
                        *o -= a0 * v0[t];
                        *o += a1 * v1[t];
                    }
                    corrections += 1;
                }
            }
        }
        result.push(out);
    }
    counter.charge(
        Category::AttentionDelta,
        full_entries * (dims.entry() + dims.accumulate()) + computed * dims.entry() + corrections * 2 * dims.accumulate(),
    );
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Pad query: all-zero tuple, nothing computed.
    Pad,
    /// Recomputed from scratch through the value path.
    Full,
    /// Base scores plus linear corrections.
    Corrected,
    /// Corrected scores were too close to a tie; re-derived from the
    /// materialized output row.
    Exact,
}

#[derive(Debug, Clone)]
pub enum RowWeights<T> {
    None,
    /// Complete causal row per head.
    Full(Vec<Vec<T>>),
    /// Per head, the new weights at the delta columns up to this row.
    Delta(Vec<Vec<T>>),
}

#[derive(Debug, Clone)]
pub struct ScoredRow<T> {
    pub route: Route,
    pub tuple: Vec<u16>,
    pub margin: T,
    pub scale: T,
    /// Unbiased inner products; empty for pads.
    pub scores: Vec<T>,
    pub weights: RowWeights<T>,
}

/// Quantization of one batch row. Rows before `first` keep the base tuple.
#[derive(Debug, Clone)]
pub struct LinearityRow<T> {
    pub delta: Vec<usize>,
    pub first: usize,
    pub fallback: bool,
    pub rows: Vec<ScoredRow<T>>,
}

impl<T: Scalar> LinearityRow<T> {
    pub fn scored(&self, row: usize) -> Option<&ScoredRow<T>> {
        row.checked_sub(self.first).and_then(|r| self.rows.get(r))
    }

    pub fn tuples(&self, cache: &AttentionCache<T>) -> Vec<Vec<u16>> {
        (0..cache.len())
            .map(|r| self.scored(r).map_or_else(|| cache.tuple(r).to_vec(), |s| s.tuple.clone()))
            .collect()
    }

    /// Smallest `margin / scale` over the rows that were scored.
    pub fn min_relative_margin(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.route != Route::Pad)
            .map(|r| r.margin.as_f64() / r.scale.as_f64().max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearityOptions {
    pub full_row_fraction: f64,
    /// Relative margin below which corrected scores are not trusted.
    pub guard: f64,
}

/// Inner products of value rows with code vectors, restricted to the
/// coordinates each attention head shares with each quantizer chunk.
struct ScoreTable<'a, T> {
    cb: &'a VqCodebook<T>,
    /// Per head: `(chunk, head-local range, chunk-local range)`.
    overlaps: Vec<Vec<(usize, std::ops::Range<usize>, std::ops::Range<usize>)>>,
    memo: HashMap<(usize, u32), Vec<T>>,
}

impl<'a, T: Scalar> ScoreTable<'a, T> {
    fn new(cb: &'a VqCodebook<T>, dims: Dims) -> Self {
        let chunk = cb.chunk();
        let overlaps = (0..dims.heads)
            .map(|a| {
                let (lo, hi) = (a * dims.d_v, (a + 1) * dims.d_v);
                (0..cb.heads())
                    .filter_map(|c| {
                        let (clo, chi) = (c * chunk, (c + 1) * chunk);
                        let (s, e) = (lo.max(clo), hi.min(chi));
                        (s < e).then(|| (c, s - lo..e - lo, s - clo..e - clo))
                    })
                    .collect()
            })
            .collect();
        ScoreTable { cb, overlaps, memo: HashMap::new() }
    }

    fn ensure(&mut self, a: usize, index: u32, head_values: &[T], counter: &FlopCounter) {
        if self.memo.contains_key(&(a, index)) {
            return;
        }
        let m = self.cb.entries();
        let mut g = Vec::with_capacity(self.overlaps[a].len() * m);
        for (c, local, in_chunk) in &self.overlaps[a] {
            for j in 0..m {
                let code = &self.cb.code(*c, j)[in_chunk.clone()];
                g.push(crate::nn::dot(&head_values[local.clone()], code));
            }
            counter.charge(Category::VqScores, cost::affine(local.len(), m));
        }
        self.memo.insert((a, index), g);
    }

    /// `scores -= w0 · G[i0]; scores += w1 · G[i1]` over head `a`'s chunks.
    fn correct(&self, a: usize, scores: &mut [T], sub: Option<(T, u32)>, add: Option<(T, u32)>) -> u64 {
        let m = self.cb.entries();
        let mut ops = 0;
        for (slot, (c, _, _)) in self.overlaps[a].iter().enumerate() {
            let dst = &mut scores[c * m..(c + 1) * m];
            if let Some((w, i)) = sub {
                let g = &self.memo[&(a, i)][slot * m..(slot + 1) * m];
                for (s, x) in dst.iter_mut().zip(g) {
                    *s -= w * *x;
                }
                ops += 2 * m as u64;
            }
            if let Some((w, i)) = add {
                let g = &self.memo[&(a, i)][slot * m..(slot + 1) * m];
                for (s, x) in dst.iter_mut().zip(g) {
                    *s += w * *x;
                }
                ops += 2 * m as u64;
            }
        }
        ops
    }
}

/// Quantization code tuples of every batch row without materializing the
/// attention outputs of corrected rows: the base scores of row `n` are
/// updated by `A_b[n,i]·G[v_b(i)] − A_base[n,i]·G[v_base(i)]` for each delta
/// column `i ≤ n`, where `G[v]` are the inner products of value row `v` with
/// the code vectors.
pub fn vq_via_linearity<T: Scalar>(
    cache: &AttentionCache<T>,
    q: &CompressedTensor<T>,
    k: &CompressedTensor<T>,
    v: &CompressedTensor<T>,
    pads: &[Vec<bool>],
    deltas: &DeltaSet,
    cb: &VqCodebook<T>,
    options: LinearityOptions,
    counter: &FlopCounter,
) -> Result<Vec<LinearityRow<T>>> {
    let dims = cache.dims;
    let n = cache.len();
    check_qkv(dims, q, k, v, n)?;
    deltas.check(q, k, v, &cache.pads, pads, counter)?;
    if (0..n).any(|r| !cache.pads[r] && cache.scores[r].len() != cb.scores_len()) {
        return Err(Error::ShapeMismatch("attention cache holds no scores for this codebook".into()));
    }
    let mut table = ScoreTable::new(cb, dims);
    let vq_cost = cost::vq_scores(dims.d, cb.heads(), cb.entries());
    let mut result = Vec::with_capacity(q.batch());
    let mut full_entries = 0u64;
    let mut accumulated = 0u64;
    let mut computed = 0u64;
    let mut score_ops = 0u64;
    let mut buf = Vec::new();
    for (b, s) in deltas.rows.iter().enumerate() {
        let Some(&first) = s.first() else {
            result.push(LinearityRow { delta: Vec::new(), first: n, fallback: false, rows: Vec::new() });
            continue;
        };
        let fallback = s.len() as f64 > options.full_row_fraction * n as f64;
        let start = if fallback { 0 } else { first };
        let pad = &pads[b];
        let qr = |i: usize| q.vector(b, i);
        let kr = |i: usize| k.vector(b, i);
        let vr = |i: usize| v.vector(b, i);
        let mut rows = Vec::with_capacity(n - start);
        for row in start..n {
            if pad[row] {
                rows.push(ScoredRow {
                    route: Route::Pad,
                    tuple: vec![0; cb.heads()],
                    margin: T::infinity(),
                    scale: T::zero(),
                    scores: Vec::new(),
                    weights: RowWeights::None,
                });
                continue;
            }
            if fallback || s.binary_search(&row).is_ok() {
                let mut out = vec![T::zero(); dims.d];
                let mut heads = Vec::with_capacity(dims.heads);
                for a in 0..dims.heads {
                    let (rq, rv) = (dims.qk(a), dims.v(a));
                    full_entries += attention_row(
                        &qr(row)[rq.clone()],
                        row,
                        |i| &kr(i)[rq.clone()],
                        |i| &vr(i)[rv.clone()],
                        |i| pad[i],
                        cache.scale,
                        Some(&mut buf),
                        &mut out[rv.start..rv.end],
                    );
                    heads.push(buf.clone());
                }
                let mut scores = vec![T::zero(); cb.scores_len()];
                cb.inner_products(&out, &mut scores);
                counter.charge(Category::VqScores, vq_cost);
                let sel = cb.select(&scores);
                rows.push(ScoredRow {
                    route: Route::Full,
                    tuple: sel.indices,
                    margin: sel.margin,
                    scale: sel.scale,
                    scores,
                    weights: RowWeights::Full(heads),
                });
                continue;
            }
            let mut scores = cache.scores[row].clone();
            let mut delta_weights = Vec::with_capacity(dims.heads);
            for a in 0..dims.heads {
                let rq = dims.qk(a);
                let mut ws = Vec::new();
                for &i in s.iter().take_while(|&&i| i <= row) {
                    let a1 = if pad[i] {
                        T::zero()
                    } else {
                        computed += 1;
                        attention_weight(&qr(row)[rq.clone()], &kr(i)[rq.clone()], cache.scale)
                    };
                    let sub = (!cache.pads[i]).then(|| {
                        let idx = v.base()[i];
                        table.ensure(a, idx, &v.code(idx)[dims.v(a)], counter);
                        (cache.base_weight(q, k, a, row, i, counter), idx)
                    });
                    let add = (!pad[i]).then(|| {
                        let idx = v.effective_index(b, i);
                        table.ensure(a, idx, &v.code(idx)[dims.v(a)], counter);
                        (a1, idx)
                    });
                    score_ops += table.correct(a, &mut scores, sub, add);
                    ws.push(a1);
                }
                delta_weights.push(ws);
            }
            let sel = cb.select(&scores);
            let threshold = options.guard * sel.scale.as_f64() * f64::from(1 + cache.age[row]);
            if sel.margin.as_f64() > threshold || options.guard == 0.0 {
                rows.push(ScoredRow {
                    route: Route::Corrected,
                    tuple: sel.indices,
                    margin: sel.margin,
                    scale: sel.scale,
                    scores,
                    weights: RowWeights::Delta(delta_weights),
                });
                continue;
            }
            let mut out = vec![T::zero(); dims.d];
            for (a, ws) in delta_weights.iter().enumerate() {
                let rv = dims.v(a);
                let mut next = 0;
                for i in 0..=row {
                    let in_delta = s.get(next) == Some(&i);
                    let w = if in_delta {
                        next += 1;
                        ws[next - 1]
                    } else {
                        cache.base_weight(q, k, a, row, i, counter)
                    };
                    if pad[i] {
                        continue;
                    }
                    for (o, x) in out[rv.clone()].iter_mut().zip(&vr(i)[rv.clone()]) {
                        *o += w * *x;
                    }
                    accumulated += 1;
                }
            }
            let mut exact = vec![T::zero(); cb.scores_len()];
            cb.inner_products(&out, &mut exact);
            counter.charge(Category::VqScores, vq_cost);
            let sel = cb.select(&exact);
            rows.push(ScoredRow {
                route: Route::Exact,
                tuple: sel.indices,
                margin: sel.margin,
                scale: sel.scale,
                scores: exact,
                weights: RowWeights::Delta(delta_weights),
            });
        }
        result.push(LinearityRow { delta: s.clone(), first: start, fallback, rows });
    }
    counter.charge(
        Category::AttentionDelta,
        full_entries * (dims.entry() + dims.accumulate())
            + accumulated * dims.accumulate()
            + computed * dims.entry()
            + score_ops,
    );
    Ok(result)
}

/// Quantized vectors keyed by code tuple.
#[derive(Debug, Clone, Default)]
pub struct TupleMemo<T> {
    pub map: HashMap<Vec<u16>, u32>,
    pub rows: Vec<T>,
}

impl<T: Scalar> TupleMemo<T> {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn index(&mut self, tuple: &[u16], cb: &VqCodebook<T>) -> u32 {
        if let Some(&i) = self.map.get(tuple) {
            return i;
        }
        let i = self.map.len() as u32;
        self.rows.extend(cb.materialize(tuple));
        self.map.insert(tuple.to_vec(), i);
        i
    }
}

/// Compressed quantized attention output. Columns where a row agrees with
/// `base` keep the base index; disagreements become overrides. New code
/// tuples are materialized into `memo`.
pub fn recompress_output<T: Scalar>(
    tuples: &[Vec<Vec<u16>>],
    base: &[Vec<u16>],
    cb: &VqCodebook<T>,
    memo: &mut TupleMemo<T>,
    counter: &FlopCounter,
) -> Result<(CompressedTensor<T>, DeltaSet)> {
    let n = base.len();
    let valid = |t: &Vec<u16>| t.len() == cb.heads() && t.iter().all(|&j| usize::from(j) < cb.entries());
    if tuples.iter().any(|r| r.len() != n || !r.iter().all(valid)) || !base.iter().all(valid) {
        return Err(Error::ShapeMismatch("code tuples do not fit the codebook".into()));
    }
    let base_idx: Vec<u32> = base.iter().map(|t| memo.index(t, cb)).collect();
    let mut overrides = std::collections::BTreeMap::new();
    let mut rows = Vec::with_capacity(tuples.len());
    for (b, row) in tuples.iter().enumerate() {
        let mut delta = Vec::new();
        for (c, t) in row.iter().enumerate() {
            if *t != base[c] {
                overrides.insert((b, c), memo.index(t, cb));
                delta.push(c);
            }
        }
        rows.push(delta);
    }
    counter.charge(Category::Bookkeeping, (tuples.len() * n) as u64);
    let ct = CompressedTensor::from_parts(tuples.len(), n, cb.dim(), memo.rows.clone(), base_idx, overrides)?;
    Ok((ct, DeltaSet { rows }))
}
