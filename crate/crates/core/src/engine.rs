//! Incremental processing of document revisions.
//!
//! The engine always runs a batch of two: row 0 is the cached base (the
//! committed document online, the first revision offline) and row 1 is the
//! revision being processed. Insertions and deletions use a union layout in
//! which a column missing from one row is a pad cell of that row.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_base, recompress_output, vq_via_linearity, AttentionCache, DeltaSet, LinearityOptions, LinearityRow,
    Route, TupleMemo,
};
use crate::compressed::{
    apply_per_location, apply_per_location_reusing, binary_elementwise_memo, binary_shared_reusing, retain_rows,
    BinaryOp, CompressedTensor, PairMemo,
};
use crate::config::{EngineOptions, ModelConfig};
use crate::error::{Error, Result};
use crate::flops::{self, dense_reference_flops, Category, FlopCounter, FlopTally, SpeedupReport};
use crate::model::{dense_forward, LayerParams, ModelParams, PAD_TOKEN};
use crate::positions::{align_offline, Alignment, Allocation, PositionMap};
use crate::scalar::{bitwise_eq, max_abs_diff, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    tokens: Vec<u32>,
    positions: PositionMap,
    revision: u64,
}

impl Document {
    /// Tokens spread over the position pool at `i · G`.
    pub fn new(tokens: Vec<u32>, config: &ModelConfig) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyDocument);
        }
        if tokens.len() > config.max_seq_len {
            return Err(Error::CapacityExceeded { len: tokens.len(), capacity: config.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfVocabulary { token: t, vocab: config.vocab_size });
        }
        let positions = PositionMap::init(tokens.len(), config.position_pool_factor, config.pool_size())?;
        Ok(Document { tokens, positions, revision: 0 })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn positions(&self) -> &PositionMap {
        &self.positions
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A single-token edit. `Insert` places the token at `slot`, shifting later
/// tokens right; `slot == len` appends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EditOp {
    Replace { slot: usize, token: u32 },
    Insert { slot: usize, token: u32 },
    Delete { slot: usize },
}

impl EditOp {
    pub fn kind(&self) -> &'static str {
        match self {
            EditOp::Replace { .. } => "replace",
            EditOp::Insert { .. } => "insert",
            EditOp::Delete { .. } => "delete",
        }
    }

    pub fn slot(&self) -> usize {
        match self {
            EditOp::Replace { slot, .. } | EditOp::Insert { slot, .. } | EditOp::Delete { slot } => *slot,
        }
    }
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditOp::Replace { slot, token } => write!(f, "replace@{slot}={token}"),
            EditOp::Insert { slot, token } => write!(f, "insert@{slot}={token}"),
            EditOp::Delete { slot } => write!(f, "delete@{slot}"),
        }
    }
}

/// Cached activations of one layer for a single row. Three index groups:
/// `x, h, q, k, v` share one; `out` follows code tuples; `x2` and the MLP
/// tensors follow `(x, out)` index pairs and become the next layer's `x`.
#[derive(Debug, Clone)]
struct LayerCache<T> {
    x: CompressedTensor<T>,
    h: CompressedTensor<T>,
    q: CompressedTensor<T>,
    k: CompressedTensor<T>,
    v: CompressedTensor<T>,
    attn: AttentionCache<T>,
    quant: TupleMemo<T>,
    out: CompressedTensor<T>,
    pairs: HashMap<(u32, u32), u32>,
    x2: CompressedTensor<T>,
    /// `(h2, m, x3)`; absent without an MLP, where `x3 = x2`.
    mlp: Option<[CompressedTensor<T>; 3]>,
    pad_x: u32,
    pad_out: u32,
    pad_x2: u32,
}

impl<T: Scalar> LayerCache<T> {
    fn x3(&self) -> &CompressedTensor<T> {
        self.mlp.as_ref().map_or(&self.x2, |m| &m[2])
    }

    fn group_a_mut(&mut self) -> [&mut CompressedTensor<T>; 5] {
        [&mut self.x, &mut self.h, &mut self.q, &mut self.k, &mut self.v]
    }

    fn group_c_mut(&mut self) -> Vec<&mut CompressedTensor<T>> {
        let mut v = vec![&mut self.x2];
        if let Some(m) = self.mlp.as_mut() {
            v.extend(m.iter_mut());
        }
        v
    }
}

/// The cached base row.
#[derive(Debug, Clone)]
struct BaseState<T> {
    tokens: Vec<u32>,
    positions: Vec<usize>,
    pads: Vec<bool>,
    layers: Vec<LayerCache<T>>,
}

/// Layer-0 input: row 0 of the codebook is the pad vector (zero), then one
/// row per non-pad column.
fn embed_tensor<T: Scalar>(params: &ModelParams<T>, tokens: &[u32], positions: &[usize], pads: &[bool]) -> Result<CompressedTensor<T>> {
    let d = params.config.d_model;
    let mut codebook = vec![T::zero(); d];
    let mut base = Vec::with_capacity(tokens.len());
    for c in 0..tokens.len() {
        if pads[c] {
            base.push(0);
        } else {
            base.push((codebook.len() / d) as u32);
            codebook.extend(params.embed_one(tokens[c], positions[c])?);
        }
    }
    CompressedTensor::from_parts(1, tokens.len(), d, codebook, base, BTreeMap::new())
}

fn pair_memo<T: Scalar>(pairs: &HashMap<(u32, u32), u32>, x2: &CompressedTensor<T>) -> PairMemo<T> {
    PairMemo { map: pairs.clone(), rows: x2.codebook().to_vec() }
}

fn build_layer<T: Scalar>(
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    options: &EngineOptions,
    x: CompressedTensor<T>,
    pad_x: u32,
    pads: &[bool],
    counter: &FlopCounter,
) -> Result<LayerCache<T>> {
    let cb = &layer.codebook;
    let h = apply_per_location(&layer.ln1(), &x, counter)?;
    let q = apply_per_location(&layer.query(), &h, counter)?;
    let k = apply_per_location(&layer.key(), &h, counter)?;
    let v = apply_per_location(&layer.value(), &h, counter)?;
    let attn = attention_base(cfg, &q, &k, &v, pads, Some(cb), options.store_attention_matrix, counter)?;
    let mut quant = TupleMemo::default();
    let pad_out = quant.index(&vec![0; cb.heads()], cb);
    let tuples = attn.tuples().to_vec();
    let (quant_ct, _) = recompress_output(std::slice::from_ref(&tuples), &tuples, cb, &mut quant, counter)?;
    let out = apply_per_location(&layer.output(), &quant_ct, counter)?;
    let (mut x2, list) = binary_elementwise_memo(BinaryOp::Add, &x, &out, &PairMemo::default(), counter)?;
    let mut pairs: HashMap<(u32, u32), u32> = list.iter().enumerate().map(|(i, p)| (*p, i as u32)).collect();
    let pad_x2 = match pairs.get(&(pad_x, pad_out)) {
        Some(&i) => i,
        None => {
            let row: Vec<T> = x.code(pad_x).iter().zip(out.code(pad_out)).map(|(a, b)| *a + *b).collect();
            counter.charge(Category::BinaryElementwise, row.len() as u64);
            let i = x2.push_row(&row);
            pairs.insert((pad_x, pad_out), i);
            i
        }
    };
    let mlp = if layer.has_mlp() {
        let h2 = apply_per_location(&layer.ln2(), &x2, counter)?;
        let m = apply_per_location(&layer.mlp(), &h2, counter)?;
        let x3 = binary_shared_reusing(BinaryOp::Add, &x2, &m, &[], counter)?;
        Some([h2, m, x3])
    } else {
        None
    };
    Ok(LayerCache { x, h, q, k, v, attn, quant, out, pairs, x2, mlp, pad_x, pad_out, pad_x2 })
}

impl<T: Scalar> BaseState<T> {
    /// One compressed forward pass of a single (possibly padded) row.
    fn build(
        params: &ModelParams<T>,
        options: &EngineOptions,
        tokens: &[u32],
        positions: &[usize],
        pads: &[bool],
        counter: &FlopCounter,
    ) -> Result<Self> {
        let mut x = embed_tensor(params, tokens, positions, pads)?;
        let mut pad_x = 0;
        let mut layers = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            let cache = build_layer(layer, &params.config, options, x, pad_x, pads, counter)?;
            x = cache.x3().clone();
            pad_x = cache.pad_x2;
            layers.push(cache);
        }
        Ok(BaseState { tokens: tokens.to_vec(), positions: positions.to_vec(), pads: pads.to_vec(), layers })
    }

    fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Final hidden states at non-pad columns.
    fn output(&self) -> Vec<T> {
        let last = self.layers.last().expect("at least one layer").x3();
        (0..self.len()).filter(|&c| !self.pads[c]).flat_map(|c| last.vector(0, c).to_vec()).collect()
    }

    /// Adds a column that is a pad cell of the base row.
    fn insert_pad_column(&mut self, col: usize, position: usize) {
        self.tokens.insert(col, PAD_TOKEN);
        self.positions.insert(col, position);
        self.pads.insert(col, true);
        for layer in &mut self.layers {
            let (pa, pb, pc) = (layer.pad_x, layer.pad_out, layer.pad_x2);
            for t in layer.group_a_mut() {
                t.insert_column(col, pa);
            }
            layer.attn.insert_pad(col);
            layer.out.insert_column(col, pb);
            for t in layer.group_c_mut() {
                t.insert_column(col, pc);
            }
        }
    }
}

/// Content of a row-1 cell relative to the base row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Same,
    Pad,
    Token(u32),
}

struct LayerDelta<T> {
    x: CompressedTensor<T>,
    h: CompressedTensor<T>,
    q: CompressedTensor<T>,
    k: CompressedTensor<T>,
    v: CompressedTensor<T>,
    lin: LinearityRow<T>,
    quant: TupleMemo<T>,
    out: CompressedTensor<T>,
    pairs: Vec<(u32, u32)>,
    x2: CompressedTensor<T>,
    mlp: Option<[CompressedTensor<T>; 3]>,
}

/// How the quantized rows of an incremental pass were obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteCounts {
    pub full: usize,
    pub corrected: usize,
    pub exact: usize,
}

struct DeltaPass<T> {
    layers: Vec<LayerDelta<T>>,
    pads: Vec<bool>,
    output: Vec<T>,
    routes: RouteCounts,
    min_relative_margin: f64,
    delta_columns: usize,
}

fn delta_pass<T: Scalar>(
    params: &ModelParams<T>,
    options: &EngineOptions,
    base: &BaseState<T>,
    cells: &[Cell],
    counter: &FlopCounter,
) -> Result<DeltaPass<T>> {
    let n = base.len();
    let pads1: Vec<bool> = (0..n)
        .map(|c| match cells[c] {
            Cell::Same => base.pads[c],
            Cell::Pad => true,
            Cell::Token(_) => false,
        })
        .collect();
    let pads = vec![base.pads.clone(), pads1.clone()];
    let x0 = &base.layers[0].x;
    let mut extra = Vec::new();
    let mut row1 = BTreeMap::new();
    let mut next = x0.rows() as u32;
    for c in 0..n {
        match cells[c] {
            Cell::Same => {}
            Cell::Pad => {
                row1.insert(c, base.layers[0].pad_x);
            }
            Cell::Token(t) => {
                let e = params.embed_one(t, base.positions[c])?;
                if !base.pads[c] && bitwise_eq(&e, x0.vector(0, c)) {
                    continue;
                }
                extra.extend(e);
                row1.insert(c, next);
                next += 1;
            }
        }
    }
    counter.charge(Category::Bookkeeping, n as u64);
    let mut x = x0.stack_edit(&extra, &row1)?;
    let delta_columns = x.override_columns(1).len();
    let lopts = LinearityOptions {
        full_row_fraction: options.full_row_fraction,
        guard: options.tie_guard(params.config.precision),
    };
    let mut routes = RouteCounts::default();
    let mut min_relative_margin = f64::INFINITY;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (layer, cache) in params.layers.iter().zip(&base.layers) {
        let cb = &layer.codebook;
        let h = apply_per_location_reusing(&layer.ln1(), &x, cache.h.codebook(), counter)?;
        let q = apply_per_location_reusing(&layer.query(), &h, cache.q.codebook(), counter)?;
        let k = apply_per_location_reusing(&layer.key(), &h, cache.k.codebook(), counter)?;
        let v = apply_per_location_reusing(&layer.value(), &h, cache.v.codebook(), counter)?;
        let deltas = DeltaSet::from_tensors(&q, &k, &v, &base.pads, &pads)?;
        let mut lin = vq_via_linearity(&cache.attn, &q, &k, &v, &pads, &deltas, cb, lopts, counter)?;
        let lin = lin.pop().expect("two batch rows");
        for r in &lin.rows {
            match r.route {
                Route::Full => routes.full += 1,
                Route::Corrected => routes.corrected += 1,
                Route::Exact => routes.exact += 1,
                Route::Pad => {}
            }
        }
        min_relative_margin = min_relative_margin.min(lin.min_relative_margin());
        let base_tuples = cache.attn.tuples().to_vec();
        let tuples = lin.tuples(&cache.attn);
        let mut quant = cache.quant.clone();
        let (quant_ct, _) = recompress_output(&[base_tuples.clone(), tuples], &base_tuples, cb, &mut quant, counter)?;
        let out = apply_per_location_reusing(&layer.output(), &quant_ct, cache.out.codebook(), counter)?;
        let (x2, pairs) = binary_elementwise_memo(BinaryOp::Add, &x, &out, &pair_memo(&cache.pairs, &cache.x2), counter)?;
        let mlp = match &cache.mlp {
            Some([h2c, mc, x3c]) => {
                let h2 = apply_per_location_reusing(&layer.ln2(), &x2, h2c.codebook(), counter)?;
                let m = apply_per_location_reusing(&layer.mlp(), &h2, mc.codebook(), counter)?;
                let x3 = binary_shared_reusing(BinaryOp::Add, &x2, &m, x3c.codebook(), counter)?;
                Some([h2, m, x3])
            }
            None => None,
        };
        let next_x = mlp.as_ref().map_or(&x2, |m| &m[2]).clone();
        layers.push(LayerDelta { x: std::mem::replace(&mut x, next_x), h, q, k, v, lin, quant, out, pairs, x2, mlp });
    }
    let output = (0..n).filter(|&c| !pads1[c]).flat_map(|c| x.vector(1, c).to_vec()).collect();
    Ok(DeltaPass { layers, pads: pads1, output, routes, min_relative_margin, delta_columns })
}

fn referenced<T: Scalar>(t: &CompressedTensor<T>, pad: u32) -> Vec<bool> {
    let mut keep = vec![false; t.rows()];
    for &i in t.base() {
        keep[i as usize] = true;
    }
    keep[pad as usize] = true;
    keep
}

impl<T: Scalar> BaseState<T> {
    /// Row 1 of `pass` becomes the base; its pad columns are dropped and
    /// codebook rows nothing refers to any more are released.
    fn commit(&mut self, pass: DeltaPass<T>, cells: &[Cell], counter: &FlopCounter) {
        let n = self.len();
        let keep: Vec<bool> = pass.pads.iter().map(|p| !p).collect();
        self.tokens = (0..n)
            .filter(|&c| keep[c])
            .map(|c| match cells[c] {
                Cell::Token(t) => t,
                _ => self.tokens[c],
            })
            .collect();
        self.positions = (0..n).filter(|&c| keep[c]).map(|c| self.positions[c]).collect();
        self.pads = vec![false; self.tokens.len()];
        let old = std::mem::take(&mut self.layers);
        for (ld, mut cache) in pass.layers.into_iter().zip(old) {
            cache.attn.commit_row(&ld.lin, &pass.pads);
            cache.attn.remove_columns(&pass.pads);
            let sel = |t: &CompressedTensor<T>| t.select_row(1, &keep);

            let x = sel(&ld.x);
            let keep_a = referenced(&x, cache.pad_x);
            let (x, remap_a) = x.compact(&keep_a);
            let group_a = [&ld.h, &ld.q, &ld.k, &ld.v].map(|t| sel(t).compact(&keep_a).0);

            let out = sel(&ld.out);
            let keep_b = referenced(&out, cache.pad_out);
            let (out, remap_b) = out.compact(&keep_b);
            let (rows, _) = retain_rows(&ld.quant.rows, out.dim(), &keep_b);
            let map = ld
                .quant
                .map
                .into_iter()
                .filter(|(_, i)| keep_b[*i as usize])
                .map(|(t, i)| (t, remap_b[i as usize]))
                .collect();

            let x2 = sel(&ld.x2);
            let keep_c = referenced(&x2, cache.pad_x2);
            let (x2, remap_c) = x2.compact(&keep_c);
            let mlp = ld.mlp.map(|m| m.map(|t| sel(&t).compact(&keep_c).0));
            let pairs = ld
                .pairs
                .iter()
                .enumerate()
                .filter(|(i, (a, b))| keep_c[*i] && keep_a[*a as usize] && keep_b[*b as usize])
                .map(|(i, (a, b))| ((remap_a[*a as usize], remap_b[*b as usize]), remap_c[i]))
                .collect();
            counter.charge(Category::Bookkeeping, (keep_a.len() + keep_b.len() + keep_c.len()) as u64);

            let [h, q, k, v] = group_a;
            self.layers.push(LayerCache {
                x,
                h,
                q,
                k,
                v,
                attn: cache.attn,
                quant: TupleMemo { map, rows },
                out,
                pairs,
                x2,
                mlp,
                pad_x: remap_a[cache.pad_x as usize],
                pad_out: remap_b[cache.pad_out as usize],
                pad_x2: remap_c[cache.pad_x2 as usize],
            });
        }
    }
}

/// Result of one incremental update.
#[derive(Debug, Clone)]
pub struct EditOutcome<T> {
    /// Final hidden states of the new revision, `n × d_model`.
    pub output: Vec<T>,
    pub report: SpeedupReport,
    pub tally: FlopTally,
    pub reindexed: bool,
    pub routes: RouteCounts,
    pub min_relative_margin: f64,
    /// Some quantization margin fell below the near-tie guard; those rows
    /// were re-derived from materialized outputs.
    pub margin_warning: bool,
    /// Layer-0 columns that differed from the committed document.
    pub delta_columns: usize,
}

#[derive(Debug, Clone, Copy)]
enum Origin {
    Old(usize),
    Replaced(usize),
    New,
}

struct Plan {
    tokens: Vec<u32>,
    positions: PositionMap,
    origin: Vec<Origin>,
    reindexed: bool,
}

fn plan(doc: &Document, ops: &[EditOp], cfg: &ModelConfig) -> Result<Plan> {
    let mut tokens = doc.tokens.clone();
    let mut positions = doc.positions.clone();
    let mut origin: Vec<Origin> = (0..tokens.len()).map(Origin::Old).collect();
    let mut reindexed = false;
    let check = |t: u32| {
        if t as usize >= cfg.vocab_size {
            Err(Error::TokenOutOfVocabulary { token: t, vocab: cfg.vocab_size })
        } else {
            Ok(())
        }
    };
    for op in ops {
        let len = tokens.len();
        match *op {
            EditOp::Replace { slot, token } => {
                if slot >= len {
                    return Err(Error::InvalidSlot { slot, len });
                }
                check(token)?;
                tokens[slot] = token;
                origin[slot] = match origin[slot] {
                    Origin::Old(j) | Origin::Replaced(j) => Origin::Replaced(j),
                    Origin::New => Origin::New,
                };
            }
            EditOp::Insert { slot, token } => {
                if slot > len {
                    return Err(Error::InvalidSlot { slot, len });
                }
                check(token)?;
                if len + 1 > cfg.max_seq_len {
                    return Err(Error::CapacityExceeded { len: len + 1, capacity: cfg.max_seq_len });
                }
                if positions.insert(slot)? == Allocation::ReindexNeeded {
                    let _ = positions.insert_reindexed(slot)?;
                    reindexed = true;
                }
                tokens.insert(slot, token);
                origin.insert(slot, Origin::New);
            }
            EditOp::Delete { slot } => {
                if slot >= len {
                    return Err(Error::InvalidSlot { slot, len });
                }
                if len == 1 {
                    return Err(Error::EmptyDocument);
                }
                positions.delete(slot)?;
                tokens.remove(slot);
                origin.remove(slot);
            }
        }
    }
    Ok(Plan { tokens, positions, origin, reindexed })
}

/// Per-layer deviation of cached state from a dense recomputation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub layer_deviation: Vec<f64>,
    pub output_deviation: f64,
    /// Positions whose cached code tuple differs from the dense one.
    pub index_disagreements: usize,
    /// Smallest winning-score margin of the dense pass.
    pub min_margin: f64,
}

impl ReplayReport {
    pub fn max_deviation(&self) -> f64 {
        self.layer_deviation.iter().copied().fold(self.output_deviation, f64::max)
    }
}

/// An online editing session over one document.
#[derive(Debug)]
pub struct EditSession<'p, T> {
    params: &'p ModelParams<T>,
    options: EngineOptions,
    doc: Document,
    state: BaseState<T>,
    counter: FlopCounter,
    open_tally: FlopTally,
}

fn check_params<T: Scalar>(params: &ModelParams<T>) -> Result<()> {
    params.config.validate()?;
    for layer in &params.layers {
        layer.codebook.check_biases()?;
    }
    Ok(())
}

/// Runs one full compressed pass over `doc` and caches every layer.
pub fn open_session<T: Scalar>(params: &ModelParams<T>, doc: Document, options: EngineOptions) -> Result<EditSession<'_, T>> {
    check_params(params)?;
    let doc = Document { positions: doc.positions.clone(), ..Document::new(doc.tokens, &params.config)? };
    doc.positions.check()?;
    let counter = FlopCounter::new();
    let pads = vec![false; doc.len()];
    let (state, open_tally) =
        counter.scoped(|| BaseState::build(params, &options, &doc.tokens, doc.positions.positions(), &pads, &counter));
    Ok(EditSession { params, options, doc, state: state?, counter, open_tally })
}

impl<'p, T: Scalar> EditSession<'p, T> {
    pub fn document(&self) -> &Document {
        &self.doc
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    /// Final hidden states of the committed document.
    pub fn output(&self) -> Vec<T> {
        self.state.output()
    }

    /// Everything charged since the session was opened.
    pub fn counter(&self) -> &FlopCounter {
        &self.counter
    }

    pub fn open_tally(&self) -> FlopTally {
        self.open_tally
    }

    /// Code tuples of the committed document, per layer.
    pub fn code_tuples(&self) -> Vec<Vec<Vec<u16>>> {
        self.state.layers.iter().map(|l| l.attn.tuples().to_vec()).collect()
    }

    /// Codebook rows per cached tensor group of each layer.
    pub fn codebook_rows(&self) -> Vec<[usize; 3]> {
        self.state.layers.iter().map(|l| [l.x.rows(), l.out.rows(), l.x2.rows()]).collect()
    }

    pub fn apply_edit(&mut self, op: EditOp) -> Result<EditOutcome<T>> {
        self.apply_edits(&[op])
    }

    /// Applies `ops` in order as one update and commits the result.
    pub fn apply_edits(&mut self, ops: &[EditOp]) -> Result<EditOutcome<T>> {
        let cfg = &self.params.config;
        let plan = plan(&self.doc, ops, cfg)?;
        let n_new = plan.tokens.len();
        let desc = ops.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let fraction = (ops.len() as f64 / n_new as f64).min(1.0);
        let dense = dense_reference_flops(cfg, 1, n_new, self.options.baseline);
        let revision = self.doc.revision + 1;
        if plan.reindexed {
            let (params, options, counter) = (self.params, &self.options, &self.counter);
            let pads = vec![false; n_new];
            let (state, tally) = counter.scoped(|| {
                counter.redirected(Category::ReindexRecompute, || {
                    BaseState::build(params, options, &plan.tokens, plan.positions.positions(), &pads, counter)
                })
            });
            self.state = state?;
            self.doc = Document { tokens: plan.tokens, positions: plan.positions, revision };
            return Ok(EditOutcome {
                output: self.state.output(),
                report: flops::report(&tally, dense, fraction, &desc, cfg),
                tally,
                reindexed: true,
                routes: RouteCounts::default(),
                min_relative_margin: f64::INFINITY,
                margin_warning: false,
                delta_columns: n_new,
            });
        }
        let mut cells = Vec::with_capacity(self.doc.len() + n_new);
        let mut inserted = Vec::new();
        let mut j = 0;
        for (e, org) in plan.origin.iter().enumerate() {
            match *org {
                Origin::Old(old) | Origin::Replaced(old) => {
                    while j < old {
                        cells.push(Cell::Pad);
                        j += 1;
                    }
                    cells.push(match org {
                        Origin::Replaced(_) => Cell::Token(plan.tokens[e]),
                        _ => Cell::Same,
                    });
                    j = old + 1;
                }
                Origin::New => {
                    inserted.push((cells.len(), plan.positions.positions()[e]));
                    cells.push(Cell::Token(plan.tokens[e]));
                }
            }
        }
        cells.extend(std::iter::repeat_n(Cell::Pad, self.doc.len() - j));
        let (params, options, counter, state) = (self.params, &self.options, &self.counter, &mut self.state);
        let (pass, tally) = counter.scoped(|| -> Result<(Vec<T>, RouteCounts, f64, usize)> {
            for &(col, position) in &inserted {
                state.insert_pad_column(col, position);
            }
            let pass = delta_pass(params, options, state, &cells, counter)?;
            let summary = (pass.output.clone(), pass.routes, pass.min_relative_margin, pass.delta_columns);
            state.commit(pass, &cells, counter);
            Ok(summary)
        });
        let (output, routes, min_relative_margin, delta_columns) = match pass {
            Ok(p) => p,
            Err(e) => {
                let pads = vec![false; self.doc.len()];
                self.state =
                    BaseState::build(params, options, &self.doc.tokens, self.doc.positions.positions(), &pads, &FlopCounter::new())?;
                return Err(e);
            }
        };
        debug_assert_eq!(self.state.tokens, plan.tokens);
        debug_assert_eq!(self.state.positions, plan.positions.positions());
        self.doc = Document { tokens: plan.tokens, positions: plan.positions, revision };
        let guard = self.options.tie_guard(cfg.precision);
        Ok(EditOutcome {
            output,
            report: flops::report(&tally, dense, fraction, &desc, cfg),
            tally,
            reindexed: false,
            routes,
            min_relative_margin,
            margin_warning: routes.exact > 0 || min_relative_margin < guard,
            delta_columns,
        })
    }

    /// Recomputes the committed document densely and compares.
    pub fn replay_verify(&self) -> Result<ReplayReport> {
        let trace = dense_forward(self.params, &self.doc.tokens, self.doc.positions.positions(), None, &FlopCounter::new())?;
        let mut layer_deviation = Vec::with_capacity(self.state.layers.len());
        let mut index_disagreements = 0;
        let mut min_margin = f64::INFINITY;
        for (l, layer) in self.state.layers.iter().enumerate() {
            let x = crate::compressed::decompress(&layer.x);
            layer_deviation.push(max_abs_diff(&x, &trace.layer_inputs[l]));
            index_disagreements += layer.attn.tuples().iter().zip(&trace.codes[l]).filter(|(a, b)| a != b).count();
            min_margin = trace.margins[l].iter().map(|m| m.as_f64()).fold(min_margin, f64::min);
        }
        Ok(ReplayReport {
            layer_deviation,
            output_deviation: max_abs_diff(&self.state.output(), &trace.output),
            index_disagreements,
            min_margin,
        })
    }
}

/// Both revisions of an offline pair, processed as one batch.
#[derive(Debug, Clone)]
pub struct OfflineOutcome<T> {
    /// Final hidden states of each revision at its own tokens.
    pub outputs: [Vec<T>; 2],
    pub alignment: Alignment,
    /// Cost of the second revision given the first, against a dense pass
    /// over the second revision.
    pub report: SpeedupReport,
    pub base_tally: FlopTally,
    pub delta_tally: FlopTally,
    /// Dense cost of both revisions.
    pub batch_dense_flops: u64,
    pub routes: RouteCounts,
    pub min_relative_margin: f64,
}

impl<T> OfflineOutcome<T> {
    /// Dense cost of both revisions over the cost of the whole batch.
    pub fn batch_ratio(&self) -> f64 {
        let spent = self.base_tally.plus(&self.delta_tally).arithmetic();
        self.batch_dense_flops as f64 / spent.max(1) as f64
    }
}

/// Aligns two revisions, runs the first as the base row and the second as
/// the incremental row.
pub fn process_offline<T: Scalar>(
    params: &ModelParams<T>,
    rev_a: &[u32],
    rev_b: &[u32],
    options: &EngineOptions,
) -> Result<OfflineOutcome<T>> {
    check_params(params)?;
    let cfg = &params.config;
    for &t in rev_a.iter().chain(rev_b) {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfVocabulary { token: t, vocab: cfg.vocab_size });
        }
    }
    let al = align_offline(rev_a, rev_b, cfg.position_pool_factor, cfg.pool_size())?;
    let counter = FlopCounter::new();
    let (base, base_tally) =
        counter.scoped(|| BaseState::build(params, options, &al.rows[0], &al.positions, &al.pads[0], &counter));
    let base = base?;
    let cells: Vec<Cell> = (0..al.len())
        .map(|c| match (al.pads[0][c], al.pads[1][c]) {
            (_, true) => Cell::Pad,
            (false, false) if al.rows[0][c] == al.rows[1][c] => Cell::Same,
            _ => Cell::Token(al.rows[1][c]),
        })
        .collect();
    let (pass, delta_tally) = counter.scoped(|| delta_pass(params, options, &base, &cells, &counter));
    let pass = pass?;
    let (na, nb) = (rev_a.len(), rev_b.len());
    let fraction = (na + nb - 2 * al.lcs) as f64 / (na + nb) as f64;
    let dense_b = dense_reference_flops(cfg, 1, nb, options.baseline);
    Ok(OfflineOutcome {
        outputs: [base.output(), pass.output],
        report: flops::report(&delta_tally, dense_b, fraction, "revision-pair", cfg),
        alignment: al,
        base_tally,
        delta_tally,
        batch_dense_flops: dense_reference_flops(cfg, 1, na, options.baseline) + dense_b,
        routes: pass.routes,
        min_relative_margin: pass.min_relative_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(precision: Precision) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 16,
            d_qk: 4,
            d_v: 4,
            num_attn_heads: 4,
            vq_heads: 2,
            vq_entries_per_head: 8,
            d_mlp: 32,
            vocab_size: 50,
            max_seq_len: 64,
            position_pool_factor: 100,
            precision,
        }
    }

    fn dense_out<T: Scalar>(params: &ModelParams<T>, doc: &Document) -> Vec<T> {
        dense_forward(params, doc.tokens(), doc.positions().positions(), None, &FlopCounter::new()).unwrap().output
    }

    fn random_op(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> EditOp {
        match rng.random_range(0..3) {
            0 => EditOp::Replace { slot: rng.random_range(0..len), token: rng.random_range(0..vocab) },
            1 => EditOp::Insert { slot: rng.random_range(0..=len), token: rng.random_range(0..vocab) },
            _ if len > 1 => EditOp::Delete { slot: rng.random_range(0..len) },
            _ => EditOp::Insert { slot: 0, token: 1 },
        }
    }

    fn run_edits<T: Scalar>(precision: Precision, seed: u64, edits: usize) {
        let cfg = small(precision);
        let params = ModelParams::<T>::calibrated(&cfg, seed, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<u32> = (0..24).map(|_| rng.random_range(0..50)).collect();
        let mut session = open_session(&params, Document::new(tokens, &cfg).unwrap(), EngineOptions::default()).unwrap();
        assert!(bitwise_eq(&session.output(), &dense_out(&params, session.document())));
        for _ in 0..edits {
            let op = random_op(&mut rng, session.document().len(), 50);
            let out = session.apply_edit(op).unwrap();
            let dense = dense_out(&params, session.document());
            assert!(bitwise_eq(&out.output, &dense), "{op}");
            assert!(bitwise_eq(&session.output(), &dense));
        }
        let replay = session.replay_verify().unwrap();
        assert_eq!(replay.max_deviation(), 0.0);
        assert_eq!(replay.index_disagreements, 0);
    }

    #[test]
    fn edits_match_dense_single() {
        run_edits::<f32>(Precision::Single, 3, 30);
    }

    #[test]
    fn edits_match_dense_double() {
        run_edits::<f64>(Precision::Double, 4, 30);
    }

    #[test]
    fn multi_op_update() {
        let cfg = small(Precision::Double);
        let params = ModelParams::<f64>::random(&cfg, 9).unwrap();
        let doc = Document::new((0..20).collect(), &cfg).unwrap();
        let mut session = open_session(&params, doc, EngineOptions::default()).unwrap();
        let ops = [
            EditOp::Insert { slot: 3, token: 7 },
            EditOp::Replace { slot: 3, token: 8 },
            EditOp::Delete { slot: 10 },
            EditOp::Insert { slot: 19, token: 2 },
        ];
        let out = session.apply_edits(&ops).unwrap();
        assert_eq!(session.document().len(), 21);
        assert_eq!(session.document().tokens()[3], 8);
        assert_eq!(session.document().revision(), 1);
        assert!(bitwise_eq(&out.output, &dense_out(&params, session.document())));
    }

    #[test]
    fn rejected_edit_leaves_document() {
        let cfg = small(Precision::Single);
        let params = ModelParams::<f32>::random(&cfg, 1).unwrap();
        let mut session = open_session(&params, Document::new(vec![1, 2, 3], &cfg).unwrap(), EngineOptions::default()).unwrap();
        let before = session.document().clone();
        assert!(matches!(session.apply_edit(EditOp::Replace { slot: 3, token: 1 }), Err(Error::InvalidSlot { .. })));
        assert!(matches!(session.apply_edit(EditOp::Insert { slot: 0, token: 50 }), Err(Error::TokenOutOfVocabulary { .. })));
        assert!(session.apply_edits(&[EditOp::Replace { slot: 0, token: 4 }, EditOp::Delete { slot: 9 }]).is_err());
        assert_eq!(session.document(), &before);
        let mut one = open_session(&params, Document::new(vec![1], &cfg).unwrap(), EngineOptions::default()).unwrap();
        assert!(matches!(one.apply_edit(EditOp::Delete { slot: 0 }), Err(Error::EmptyDocument)));
    }

    #[test]
    fn repeated_front_inserts_reindex() {
        let mut cfg = small(Precision::Double);
        cfg.position_pool_factor = 4;
        let params = ModelParams::<f64>::random(&cfg, 2).unwrap();
        let mut session = open_session(&params, Document::new(vec![1, 2, 3, 4], &cfg).unwrap(), EngineOptions::default()).unwrap();
        let mut reindexed = 0;
        for t in 0..6 {
            let out = session.apply_edit(EditOp::Insert { slot: 1, token: t }).unwrap();
            if out.reindexed {
                reindexed += 1;
                assert!(out.tally.get(Category::ReindexRecompute) > 0);
                assert_eq!(session.document().positions().positions()[1], cfg.position_pool_factor);
            }
            assert!(bitwise_eq(&out.output, &dense_out(&params, session.document())));
        }
        assert!(reindexed > 0);
    }

    #[test]
    fn replace_with_same_token_is_free_of_layer_work() {
        let cfg = small(Precision::Single);
        let params = ModelParams::<f32>::random(&cfg, 5).unwrap();
        let mut session = open_session(&params, Document::new((0..16).collect(), &cfg).unwrap(), EngineOptions::default()).unwrap();
        let out = session.apply_edit(EditOp::Replace { slot: 4, token: 4 }).unwrap();
        assert_eq!(out.delta_columns, 0);
        assert_eq!(out.tally.arithmetic(), 0);
    }

    #[test]
    fn offline_pair_matches_dense() {
        let cfg = small(Precision::Double);
        let params = ModelParams::<f64>::calibrated(&cfg, 6, 2).unwrap();
        let a: Vec<u32> = (0..30).map(|i| (i * 7) % 50).collect();
        let mut b = a.clone();
        b[5] = 49;
        b.insert(12, 3);
        b.remove(20);
        let res = process_offline(&params, &a, &b, &EngineOptions::default()).unwrap();
        let al = &res.alignment;
        for (row, toks) in [&a, &b].into_iter().enumerate() {
            let dense = dense_forward(&params, &al.rows[row], &al.positions, None, &FlopCounter::new()).unwrap();
            assert!(bitwise_eq(&res.outputs[row], &dense.unpadded_output(cfg.d_model)));
            assert_eq!(al.strip(row), *toks);
        }
        assert!(res.report.ratio > 1.0);
        assert!(res.batch_ratio() > 1.0);
    }
}
