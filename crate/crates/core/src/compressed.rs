//! Compressed activations: a `b × n × d` tensor stored as a codebook of
//! unique vectors, one base index per sequence position, and sparse
//! per-cell overrides.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::flops::{Category, FlopCounter};
use crate::nn::PerLocationOp;
use crate::scalar::{vector_key, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTensor<T> {
    batch: usize,
    seq: usize,
    dim: usize,
    codebook: Vec<T>,
    base: Vec<u32>,
    overrides: BTreeMap<(usize, usize), u32>,
}

impl<T: Scalar> CompressedTensor<T> {
    pub fn from_parts(
        batch: usize,
        seq: usize,
        dim: usize,
        codebook: Vec<T>,
        base: Vec<u32>,
        overrides: BTreeMap<(usize, usize), u32>,
    ) -> Result<Self> {
        if dim == 0 && !codebook.is_empty() || dim > 0 && codebook.len() % dim != 0 {
            return Err(Error::ShapeMismatch("codebook length not a multiple of dim".into()));
        }
        if base.len() != seq {
            return Err(Error::ShapeMismatch(format!("base of {} for seq {seq}", base.len())));
        }
        let q = if dim == 0 { 0 } else { codebook.len() / dim };
        let bad_index = base.iter().chain(overrides.values()).any(|&i| i as usize >= q && !(dim == 0 && q == 0));
        if bad_index && dim > 0 {
            return Err(Error::ShapeMismatch("index beyond codebook".into()));
        }
        if overrides.keys().any(|&(r, c)| r >= batch || c >= seq) {
            return Err(Error::ShapeMismatch("override outside tensor".into()));
        }
        Ok(CompressedTensor { batch, seq, dim, codebook, base, overrides })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of codebook rows.
    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.codebook.len() / self.dim
        }
    }

    pub fn codebook(&self) -> &[T] {
        &self.codebook
    }

    pub fn code(&self, row: u32) -> &[T] {
        let r = row as usize;
        &self.codebook[r * self.dim..(r + 1) * self.dim]
    }

    pub fn base(&self) -> &[u32] {
        &self.base
    }

    pub fn overrides(&self) -> &BTreeMap<(usize, usize), u32> {
        &self.overrides
    }

    pub fn effective_index(&self, row: usize, col: usize) -> u32 {
        self.overrides.get(&(row, col)).copied().unwrap_or(self.base[col])
    }

    pub fn vector(&self, row: usize, col: usize) -> &[T] {
        self.code(self.effective_index(row, col))
    }

    /// Sorted override columns of one batch row.
    pub fn override_columns(&self, row: usize) -> Vec<usize> {
        self.overrides
            .range((row, 0)..(row + 1, 0))
            .map(|(&(_, c), _)| c)
            .collect()
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.batch == other.batch
            && self.seq == other.seq
            && self.rows() == other.rows()
            && self.base == other.base
            && self.overrides == other.overrides
    }

    /// Canonical form: no override repeats its column's base index and
    /// each base index is a most-frequent effective index of its column.
    pub fn is_canonical(&self) -> bool {
        if self.overrides.iter().any(|(&(_, c), &i)| self.base[c] == i) {
            return false;
        }
        let mut per_col: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
        for (&(_, c), &i) in &self.overrides {
            *per_col.entry(c).or_default().entry(i).or_default() += 1;
        }
        per_col.values().all(|counts| {
            let base_count = self.batch - counts.values().sum::<usize>();
            counts.values().all(|&n| n <= base_count)
        })
    }

    /// Rows referenced by base or overrides.
    pub fn referenced_rows(&self) -> BTreeSet<u32> {
        self.base.iter().chain(self.overrides.values()).copied().collect()
    }

    /// A `b = 2` tensor whose first row is this single-row tensor and whose
    /// second row differs at `row1` columns. `extra` rows are appended to the
    /// codebook first.
    pub fn stack_edit(&self, extra: &[T], row1: &BTreeMap<usize, u32>) -> Result<Self> {
        if self.batch != 1 {
            return Err(Error::ShapeMismatch("stack_edit needs a single-row tensor".into()));
        }
        let mut codebook = self.codebook.clone();
        codebook.extend_from_slice(extra);
        let overrides = row1
            .iter()
            .filter(|(&c, &i)| self.base[c] != i)
            .map(|(&c, &i)| ((1, c), i))
            .collect();
        CompressedTensor::from_parts(2, self.seq, self.dim, codebook, self.base.clone(), overrides)
    }

    /// Effective indices of one batch row.
    pub fn row_indices(&self, row: usize) -> Vec<u32> {
        (0..self.seq).map(|c| self.effective_index(row, c)).collect()
    }

    fn with_codebook(&self, dim: usize, codebook: Vec<T>) -> Self {
        CompressedTensor {
            batch: self.batch,
            seq: self.seq,
            dim,
            codebook,
            base: self.base.clone(),
            overrides: self.overrides.clone(),
        }
    }
}

/// Groups cells by exact bit equality. The most frequent index per column
/// becomes the base (lowest index on ties); everything else is an override.
pub fn compress<T: Scalar>(dense: &[T], batch: usize, seq: usize, dim: usize) -> Result<CompressedTensor<T>> {
    if dense.len() != batch * seq * dim {
        return Err(Error::ShapeMismatch(format!("{} values for {batch}x{seq}x{dim}", dense.len())));
    }
    let mut ids: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut codebook = Vec::new();
    let mut index = vec![0u32; batch * seq];
    for r in 0..batch {
        for c in 0..seq {
            let v = &dense[(r * seq + c) * dim..(r * seq + c + 1) * dim];
            let next = ids.len() as u32;
            let id = *ids.entry(vector_key(v)).or_insert_with(|| {
                codebook.extend_from_slice(v);
                next
            });
            index[r * seq + c] = id;
        }
    }
    let (base, overrides) = elect_base(batch, seq, |r, c| index[r * seq + c]);
    CompressedTensor::from_parts(batch, seq, dim, codebook, base, overrides)
}

fn elect_base(
    batch: usize,
    seq: usize,
    effective: impl Fn(usize, usize) -> u32,
) -> (Vec<u32>, BTreeMap<(usize, usize), u32>) {
    let mut base = Vec::with_capacity(seq);
    let mut overrides = BTreeMap::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for c in 0..seq {
        counts.clear();
        for r in 0..batch {
            *counts.entry(effective(r, c)).or_default() += 1;
        }
        // BTreeMap iterates in ascending index order, so `>` keeps the lowest.
        let mut best = (0u32, 0usize);
        for (&i, &n) in &counts {
            if n > best.1 {
                best = (i, n);
            }
        }
        base.push(best.0);
        for r in 0..batch {
            let e = effective(r, c);
            if e != best.0 {
                overrides.insert((r, c), e);
            }
        }
    }
    (base, overrides)
}

pub fn decompress<T: Scalar>(ct: &CompressedTensor<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(ct.batch * ct.seq * ct.dim);
    for r in 0..ct.batch {
        for c in 0..ct.seq {
            out.extend_from_slice(ct.vector(r, c));
        }
    }
    out
}

/// Applies `op` to every codebook row; indices are untouched. Charges
/// `rows · cost(op)` regardless of batch size.
pub fn apply_per_location<T: Scalar>(
    op: &PerLocationOp<'_, T>,
    ct: &CompressedTensor<T>,
    counter: &FlopCounter,
) -> Result<CompressedTensor<T>> {
    apply_per_location_reusing(op, ct, &[], counter)
}

/// Like [`apply_per_location`], but the first `cached.len() / d_out` rows
/// are taken from `cached`, which must hold `op` applied to those same
/// input rows.
pub fn apply_per_location_reusing<T: Scalar>(
    op: &PerLocationOp<'_, T>,
    ct: &CompressedTensor<T>,
    cached: &[T],
    counter: &FlopCounter,
) -> Result<CompressedTensor<T>> {
    if op.input_dim() != ct.dim {
        return Err(Error::ShapeMismatch(format!(
            "op takes {} but tensor has dim {}",
            op.input_dim(),
            ct.dim
        )));
    }
    let dout = op.output_dim();
    let reused = if dout == 0 { 0 } else { cached.len() / dout };
    if reused > ct.rows() {
        return Err(Error::ShapeMismatch("more cached rows than codebook rows".into()));
    }
    let mut codebook = Vec::with_capacity(ct.rows() * dout);
    codebook.extend_from_slice(&cached[..reused * dout]);
    let mut buf = vec![T::zero(); dout];
    for r in reused..ct.rows() {
        op.apply(ct.code(r as u32), &mut buf);
        codebook.extend_from_slice(&buf);
    }
    counter.charge(Category::PerLocation, (ct.rows() - reused) as u64 * op.cost());
    Ok(ct.with_codebook(dout, codebook))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    pub fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }

    fn combine<T: Scalar>(self, a: &[T], b: &[T], out: &mut Vec<T>) {
        out.extend(a.iter().zip(b).map(|(x, y)| self.apply(*x, *y)));
    }
}

/// Output rows already computed for some `(x_row, y_row)` pairs.
#[derive(Debug, Clone, Default)]
pub struct PairMemo<T> {
    pub map: HashMap<(u32, u32), u32>,
    pub rows: Vec<T>,
}

/// Element-wise `op(x, y)`. Tensors with identical index structure combine
/// codebook rows directly; otherwise one output row is made per unique
/// index pair.
pub fn binary_elementwise<T: Scalar>(
    op: BinaryOp,
    x: &CompressedTensor<T>,
    y: &CompressedTensor<T>,
    counter: &FlopCounter,
) -> Result<CompressedTensor<T>> {
    check_dims(x, y)?;
    if x.same_structure(y) {
        return binary_shared_reusing(op, x, y, &[], counter);
    }
    binary_elementwise_memo(op, x, y, &PairMemo::default(), counter).map(|(ct, _)| ct)
}

fn check_dims<T: Scalar>(x: &CompressedTensor<T>, y: &CompressedTensor<T>) -> Result<()> {
    if x.batch != y.batch || x.seq != y.seq || x.dim != y.dim {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.batch, x.seq, x.dim, y.batch, y.seq, y.dim
        )));
    }
    Ok(())
}

/// Shared-structure path: output row `r` is `op(x_r, y_r)`; the first
/// `cached.len() / dim` rows come from `cached`.
pub fn binary_shared_reusing<T: Scalar>(
    op: BinaryOp,
    x: &CompressedTensor<T>,
    y: &CompressedTensor<T>,
    cached: &[T],
    counter: &FlopCounter,
) -> Result<CompressedTensor<T>> {
    check_dims(x, y)?;
    if !x.same_structure(y) {
        return Err(Error::ShapeMismatch("index structures differ".into()));
    }
    let d = x.dim;
    let reused = if d == 0 { 0 } else { cached.len() / d };
    let mut codebook = Vec::with_capacity(x.codebook.len());
    codebook.extend_from_slice(&cached[..reused * d]);
    for r in reused..x.rows() {
        op.combine(x.code(r as u32), y.code(r as u32), &mut codebook);
    }
    counter.charge(Category::BinaryElementwise, ((x.rows() - reused) * d) as u64);
    Ok(x.with_codebook(d, codebook))
}

/// General path over unique index pairs, seeded with `memo`. Pairs are
/// visited base columns first, then override cells in `(row, col)` order.
/// Returns the tensor and the index pair behind every output row.
pub fn binary_elementwise_memo<T: Scalar>(
    op: BinaryOp,
    x: &CompressedTensor<T>,
    y: &CompressedTensor<T>,
    memo: &PairMemo<T>,
    counter: &FlopCounter,
) -> Result<(CompressedTensor<T>, Vec<(u32, u32)>)> {
    check_dims(x, y)?;
    let d = x.dim;
    let mut map = memo.map.clone();
    let mut pairs = vec![(u32::MAX, u32::MAX); map.len()];
    for (&p, &i) in &map {
        pairs[i as usize] = p;
    }
    let mut codebook = memo.rows.clone();
    let mut lookups = 0u64;
    let mut fresh = 0u64;
    let mut index_of = |px: u32, py: u32, codebook: &mut Vec<T>, pairs: &mut Vec<(u32, u32)>| -> u32 {
        lookups += 1;
        if let Some(&i) = map.get(&(px, py)) {
            return i;
        }
        let i = pairs.len() as u32;
        op.combine(x.code(px), y.code(py), codebook);
        fresh += 1;
        map.insert((px, py), i);
        pairs.push((px, py));
        i
    };
    let mut base = Vec::with_capacity(x.seq);
    for c in 0..x.seq {
        base.push(index_of(x.base[c], y.base[c], &mut codebook, &mut pairs));
    }
    let cells: BTreeSet<(usize, usize)> = x.overrides.keys().chain(y.overrides.keys()).copied().collect();
    let mut overrides = BTreeMap::new();
    for (r, c) in cells {
        let i = index_of(x.effective_index(r, c), y.effective_index(r, c), &mut codebook, &mut pairs);
        if i != base[c] {
            overrides.insert((r, c), i);
        }
    }
    counter.charge(Category::BinaryElementwise, fresh * d as u64);
    counter.charge(Category::Bookkeeping, lookups);
    let ct = CompressedTensor { batch: x.batch, seq: x.seq, dim: d, codebook, base, overrides };
    Ok((ct, pairs))
}

/// Drops unreferenced rows, merges bit-identical rows, and re-elects the
/// base of every column. Decompressed values are unchanged.
pub fn gc_codebook<T: Scalar>(ct: &CompressedTensor<T>, counter: &FlopCounter) -> CompressedTensor<T> {
    let referenced = ct.referenced_rows();
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut by_bits: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut codebook = Vec::new();
    for &r in &referenced {
        let v = ct.code(r);
        let next = by_bits.len() as u32;
        let id = *by_bits.entry(vector_key(v)).or_insert_with(|| {
            codebook.extend_from_slice(v);
            next
        });
        remap.insert(r, id);
    }
    counter.charge(Category::Bookkeeping, (referenced.len() * ct.dim) as u64);
    // Only columns carrying overrides can have a different mode.
    let mut base: Vec<u32> = ct.base.iter().map(|i| remap[i]).collect();
    let mut overrides = BTreeMap::new();
    let mut touched: BTreeMap<usize, Vec<(usize, u32)>> = BTreeMap::new();
    for (&(r, c), &i) in &ct.overrides {
        touched.entry(c).or_default().push((r, remap[&i]));
    }
    for (c, cells) in touched {
        let old_base = base[c];
        let effective = |r: usize| cells.iter().find(|(rr, _)| *rr == r).map_or(old_base, |(_, i)| *i);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        *counts.entry(old_base).or_default() += ct.batch - cells.len();
        for (_, i) in &cells {
            *counts.entry(*i).or_default() += 1;
        }
        let mut best = (0u32, 0usize);
        for (&i, &n) in &counts {
            if n > best.1 {
                best = (i, n);
            }
        }
        base[c] = best.0;
        if best.0 == old_base {
            for &(r, i) in &cells {
                if i != best.0 {
                    overrides.insert((r, c), i);
                }
            }
        } else {
            for r in 0..ct.batch {
                let e = effective(r);
                if e != best.0 {
                    overrides.insert((r, c), e);
                }
            }
        }
    }
    CompressedTensor { batch: ct.batch, seq: ct.seq, dim: ct.dim, codebook, base, overrides }
}

/// Keeps the rows flagged in `keep`, in order. Returns the new codebook and
/// the old-to-new index map (`u32::MAX` for dropped rows).
pub(crate) fn retain_rows<T: Scalar>(codebook: &[T], dim: usize, keep: &[bool]) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::new();
    let mut remap = vec![u32::MAX; keep.len()];
    let mut next = 0u32;
    for (r, &k) in keep.iter().enumerate() {
        if k {
            out.extend_from_slice(&codebook[r * dim..(r + 1) * dim]);
            remap[r] = next;
            next += 1;
        }
    }
    (out, remap)
}

impl<T: Scalar> CompressedTensor<T> {
    /// Single-row tensor of `row`'s effective indices at the columns where
    /// `keep` is set, sharing this codebook.
    pub(crate) fn select_row(&self, row: usize, keep: &[bool]) -> Self {
        let base = (0..self.seq).filter(|&c| keep[c]).map(|c| self.effective_index(row, c)).collect::<Vec<_>>();
        CompressedTensor {
            batch: 1,
            seq: base.len(),
            dim: self.dim,
            codebook: self.codebook.clone(),
            base,
            overrides: BTreeMap::new(),
        }
    }

    /// Appends a codebook row and returns its index.
    pub(crate) fn push_row(&mut self, row: &[T]) -> u32 {
        self.codebook.extend_from_slice(row);
        (self.rows() - 1) as u32
    }

    /// Inserts a column holding `index` in every row of a single-row tensor.
    pub(crate) fn insert_column(&mut self, col: usize, index: u32) {
        debug_assert!(self.batch == 1 && self.overrides.is_empty());
        self.base.insert(col, index);
        self.seq += 1;
    }

    /// Drops codebook rows not flagged in `keep` and renumbers indices.
    /// Every referenced row must be kept.
    pub(crate) fn compact(&self, keep: &[bool]) -> (Self, Vec<u32>) {
        let (codebook, remap) = retain_rows(&self.codebook, self.dim, keep);
        let base = self.base.iter().map(|&i| remap[i as usize]).collect();
        let overrides = self.overrides.iter().map(|(&k, &i)| (k, remap[i as usize])).collect();
        let ct = CompressedTensor { batch: self.batch, seq: self.seq, dim: self.dim, codebook, base, overrides };
        (ct, remap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::bitwise_eq;

    fn sample(batch: usize, seq: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..batch * seq * dim)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) % 7) as f64 - 3.0
            })
            .collect()
    }

    #[test]
    fn identical_rows_have_no_overrides() {
        let row = sample(1, 6, 3, 1);
        let dense: Vec<f64> = row.iter().chain(&row).chain(&row).copied().collect();
        let ct = compress(&dense, 3, 6, 3).unwrap();
        assert!(ct.overrides().is_empty());
        let distinct: BTreeSet<Vec<u64>> = row.chunks(3).map(vector_key).collect();
        assert_eq!(ct.rows(), distinct.len());
    }

    #[test]
    fn single_difference_is_single_override() {
        let row: Vec<f64> = (0..8 * 2).map(|v| v as f64).collect();
        let mut dense: Vec<f64> = row.iter().chain(&row).copied().collect();
        dense[(8 + 5) * 2] = -1.0;
        let ct = compress(&dense, 2, 8, 2).unwrap();
        assert_eq!(ct.overrides().len(), 1);
        assert!(ct.overrides().contains_key(&(1, 5)));
    }

    #[test]
    fn round_trip_and_canonical() {
        for seed in 0..20 {
            let dense = sample(4, 9, 2, seed);
            let ct = compress(&dense, 4, 9, 2).unwrap();
            assert!(bitwise_eq(&decompress(&ct), &dense));
            assert!(ct.is_canonical());
        }
    }

    #[test]
    fn empty_overrides_decompress_to_identical_rows() {
        let ct = CompressedTensor::from_parts(3, 2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![1, 0], BTreeMap::new()).unwrap();
        let d = decompress(&ct);
        assert_eq!(&d[0..4], &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(&d[0..4], &d[4..8]);
        assert_eq!(&d[0..4], &d[8..12]);
        let one = CompressedTensor::from_parts(2, 3, 2, vec![5.0, 6.0], vec![0, 0, 0], BTreeMap::new()).unwrap();
        assert!(decompress(&one).chunks(2).all(|c| c == [5.0, 6.0]));
    }

    #[test]
    fn per_location_identity_is_bitwise_noop() {
        let dense = sample(3, 5, 4, 9);
        let ct = compress(&dense, 3, 5, 4).unwrap();
        let counter = FlopCounter::new();
        let out = apply_per_location(&PerLocationOp::Identity(4), &ct, &counter).unwrap();
        assert_eq!(out, ct);
        assert_eq!(counter.tally().arithmetic(), 0);
    }

    #[test]
    fn per_location_dimension_mismatch() {
        let ct = compress(&sample(1, 2, 3, 0), 1, 2, 3).unwrap();
        assert!(apply_per_location(&PerLocationOp::Gelu(4), &ct, &FlopCounter::new()).is_err());
    }

    #[test]
    fn shared_structure_add_keeps_codebook_size() {
        let dense = sample(3, 6, 2, 4);
        let x = compress(&dense, 3, 6, 2).unwrap();
        let y = apply_per_location(&PerLocationOp::Scale(2.0, 2), &x, &FlopCounter::new()).unwrap();
        let out = binary_elementwise(BinaryOp::Add, &x, &y, &FlopCounter::new()).unwrap();
        assert_eq!(out.rows(), x.rows());
        assert!(out.same_structure(&x));
    }

    #[test]
    fn adding_zeros_is_identity() {
        let dense = sample(2, 7, 3, 5);
        let x = compress(&dense, 2, 7, 3).unwrap();
        let z = compress(&vec![0.0; 2 * 7 * 3], 2, 7, 3).unwrap();
        let out = binary_elementwise(BinaryOp::Add, &x, &z, &FlopCounter::new()).unwrap();
        assert!(bitwise_eq(&decompress(&out), &dense));
    }

    #[test]
    fn gc_removes_dead_rows() {
        let ct = CompressedTensor::from_parts(
            2,
            3,
            1,
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0, 1, 2],
            [((1, 2), 3)].into_iter().collect(),
        )
        .unwrap();
        let out = gc_codebook(&ct, &FlopCounter::new());
        assert_eq!(out.rows(), ct.rows() - 2);
        assert_eq!(decompress(&out), decompress(&ct));
    }

    #[test]
    fn gc_fixed_point() {
        let ct = compress(&sample(3, 6, 2, 11), 3, 6, 2).unwrap();
        let out = gc_codebook(&ct, &FlopCounter::new());
        assert_eq!(out.base(), ct.base());
        assert_eq!(out.overrides(), ct.overrides());
        assert!(bitwise_eq(out.codebook(), ct.codebook()));
    }

    #[test]
    fn gc_reelects_base() {
        // Base 0 at column 0 but two of three rows override with 1.
        let ct = CompressedTensor::from_parts(
            3,
            1,
            1,
            vec![7.0, 8.0],
            vec![0],
            [((1, 0), 1), ((2, 0), 1)].into_iter().collect(),
        )
        .unwrap();
        assert!(!ct.is_canonical());
        let out = gc_codebook(&ct, &FlopCounter::new());
        assert!(out.is_canonical());
        assert_eq!(out.overrides().len(), 1);
        assert_eq!(decompress(&out), decompress(&ct));
    }
}
