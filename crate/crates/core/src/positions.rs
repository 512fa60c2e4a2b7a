//! Gap-spaced positional indices, offline alignment and pool sizing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PAD_TOKEN;

/// Strictly increasing position index per token slot, drawn from a pool of
/// `gap · max_seq_len` positional embeddings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    positions: Vec<usize>,
    gap: usize,
    pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    Position(usize),
    /// The neighbors are adjacent; nothing was changed.
    ReindexNeeded,
}

/// Every cached activation of the document is stale after a reindex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[must_use]
pub struct CacheInvalidation {
    pub tokens: usize,
}

impl PositionMap {
    /// Token `i` at position `i · gap`.
    pub fn init(n: usize, gap: usize, pool: usize) -> Result<Self> {
        if gap == 0 {
            return Err(Error::InvalidConfig("gap must be at least 1".into()));
        }
        if n * gap > pool {
            return Err(Error::CapacityExceeded { len: n, capacity: pool / gap });
        }
        Ok(PositionMap { positions: (0..n).map(|i| i * gap).collect(), gap, pool })
    }

    pub fn from_positions(positions: Vec<usize>, gap: usize, pool: usize) -> Result<Self> {
        let pm = PositionMap { positions, gap, pool };
        pm.check()?;
        Ok(pm)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn gap(&self) -> usize {
        self.gap
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn check(&self) -> Result<()> {
        for (slot, w) in self.positions.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::PositionsNotIncreasing { slot: slot + 1 });
            }
        }
        match self.positions.last() {
            Some(&p) if p >= self.pool => Err(Error::PositionOutOfRange { position: p, pool: self.pool }),
            _ => Ok(()),
        }
    }

    /// Position for a token that would become slot `slot` (`len` appends).
    /// Between two neighbors this is their floor midpoint; at the front the
    /// lower neighbor counts as −1; at the end it is `last + gap`, or the
    /// midpoint towards the pool end when that is closer.
    pub fn propose(&self, slot: usize) -> Result<Allocation> {
        let n = self.positions.len();
        if slot > n {
            return Err(Error::InvalidSlot { slot, len: n });
        }
        let lower = if slot == 0 { -1 } else { self.positions[slot - 1] as i64 };
        let upper = if slot < n {
            self.positions[slot] as i64
        } else if n == 0 {
            return Ok(Allocation::Position(0));
        } else {
            let last = lower;
            let pool = self.pool as i64;
            let step = (last + self.gap as i64).min(last + (pool - last) / 2);
            return Ok(if step > last && step < pool {
                Allocation::Position(step as usize)
            } else {
                Allocation::ReindexNeeded
            });
        };
        if upper - lower < 2 {
            return Ok(Allocation::ReindexNeeded);
        }
        Ok(Allocation::Position((lower + (upper - lower) / 2) as usize))
    }

    /// Like [`PositionMap::propose`], committing the position on success.
    pub fn insert(&mut self, slot: usize) -> Result<Allocation> {
        let a = self.propose(slot)?;
        if let Allocation::Position(p) = a {
            self.positions.insert(slot, p);
        }
        Ok(a)
    }

    /// Inserts a slot and respaces the whole map.
    pub fn insert_reindexed(&mut self, slot: usize) -> Result<CacheInvalidation> {
        let n = self.positions.len();
        if slot > n {
            return Err(Error::InvalidSlot { slot, len: n });
        }
        if (n + 1) * self.gap > self.pool {
            return Err(Error::CapacityExceeded { len: n + 1, capacity: self.pool / self.gap });
        }
        self.positions.insert(slot, 0);
        Ok(self.reindex())
    }

    /// Removes a slot; every other position is left as it was.
    pub fn delete(&mut self, slot: usize) -> Result<usize> {
        if slot >= self.positions.len() {
            return Err(Error::InvalidSlot { slot, len: self.positions.len() });
        }
        Ok(self.positions.remove(slot))
    }

    /// Respaces to `i · gap`.
    pub fn reindex(&mut self) -> CacheInvalidation {
        for (i, p) in self.positions.iter_mut().enumerate() {
            *p = i * self.gap;
        }
        CacheInvalidation { tokens: self.positions.len() }
    }
}

/// Two revisions laid out column by column, with [`PAD_TOKEN`] where a token
/// has no counterpart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub rows: [Vec<u32>; 2],
    pub pads: [Vec<bool>; 2],
    /// Column `j` sits at position `j · gap`.
    pub positions: Vec<usize>,
    pub lcs: usize,
}

impl Alignment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The original tokens of one revision.
    pub fn strip(&self, row: usize) -> Vec<u32> {
        self.rows[row].iter().copied().filter(|&t| t != PAD_TOKEN).collect()
    }
}

/// Longest-common-subsequence alignment. Within a run of unmatched tokens
/// the tokens of `a` come first.
pub fn align_offline(a: &[u32], b: &[u32], gap: usize, pool: usize) -> Result<Alignment> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let (n, m) = (a.len(), b.len());
    // table[i][j] = LCS of a[i..] and b[j..]
    let mut table = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[at(i, j)] = if a[i] == b[j] {
                table[at(i + 1, j + 1)] + 1
            } else {
                table[at(i + 1, j)].max(table[at(i, j + 1)])
            };
        }
    }
    let mut rows = [Vec::new(), Vec::new()];
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] && table[at(i, j)] == table[at(i + 1, j + 1)] + 1 {
            rows[0].push(a[i]);
            rows[1].push(b[j]);
            i += 1;
            j += 1;
        } else if i < n && (j == m || table[at(i + 1, j)] >= table[at(i, j + 1)]) {
            rows[0].push(a[i]);
            rows[1].push(PAD_TOKEN);
            i += 1;
        } else {
            rows[0].push(PAD_TOKEN);
            rows[1].push(b[j]);
            j += 1;
        }
    }
    let len = rows[0].len();
    if gap == 0 || len * gap > pool {
        return Err(Error::CapacityExceeded { len, capacity: pool / gap.max(1) });
    }
    let pads = [rows[0].iter().map(|&t| t == PAD_TOKEN).collect(), rows[1].iter().map(|&t| t == PAD_TOKEN).collect()];
    Ok(Alignment { rows, pads, positions: (0..len).map(|c| c * gap).collect(), lcs: table[0] as usize })
}

/// Expected number of training iterations before every one of `k`
/// positional embeddings has been sampled: `⌈k·log₂k / samples⌉`, with the
/// log clamped to at least one.
pub fn coupon_iterations(k: u64, samples_per_iter: u64) -> Result<u64> {
    if k == 0 || samples_per_iter == 0 {
        return Err(Error::InvalidValue("coupon_iterations needs k and samples of at least 1"));
    }
    let log = (k as f64).log2().max(1.0);
    Ok((k as f64 * log / samples_per_iter as f64).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_spreads_uniformly() {
        assert_eq!(PositionMap::init(4, 100, 1000).unwrap().positions(), &[0, 100, 200, 300]);
        assert_eq!(PositionMap::init(1, 100, 1000).unwrap().positions(), &[0]);
        assert!(PositionMap::init(11, 100, 1000).is_err());
    }

    #[test]
    fn midpoint_and_exhaustion() {
        let pm = PositionMap::from_positions(vec![100, 200], 100, 1000).unwrap();
        assert_eq!(pm.propose(1).unwrap(), Allocation::Position(150));
        let pm = PositionMap::from_positions(vec![100, 101], 100, 1000).unwrap();
        assert_eq!(pm.propose(1).unwrap(), Allocation::ReindexNeeded);
    }

    #[test]
    fn front_and_end() {
        let pm = PositionMap::from_positions(vec![0, 100], 100, 1000).unwrap();
        assert_eq!(pm.propose(0).unwrap(), Allocation::ReindexNeeded);
        let pm = PositionMap::from_positions(vec![8, 100], 100, 1000).unwrap();
        assert_eq!(pm.propose(0).unwrap(), Allocation::Position(3));
        assert_eq!(pm.propose(2).unwrap(), Allocation::Position(200));
        let pm = PositionMap::from_positions(vec![0, 900], 100, 1000).unwrap();
        assert_eq!(pm.propose(2).unwrap(), Allocation::Position(950));
        let pm = PositionMap::from_positions(vec![0, 999], 100, 1000).unwrap();
        assert_eq!(pm.propose(2).unwrap(), Allocation::ReindexNeeded);
        assert!(pm.propose(3).is_err());
    }

    #[test]
    fn delete_leaves_others() {
        let mut pm = PositionMap::init(3, 100, 1000).unwrap();
        pm.delete(1).unwrap();
        assert_eq!(pm.positions(), &[0, 200]);
        assert_eq!(pm.insert(1).unwrap(), Allocation::Position(100));
        assert!(pm.delete(5).is_err());
    }

    #[test]
    fn reindex_restores_gaps() {
        let mut pm = PositionMap::init(3, 100, 100_000).unwrap();
        let notice = pm.reindex();
        assert_eq!(notice.tokens, 3);
        assert_eq!(pm.positions(), &[0, 100, 200]);
    }

    #[test]
    fn alignment_of_one_insertion() {
        let al = align_offline(&[1, 2, 3], &[1, 9, 2, 3], 10, 1000).unwrap();
        assert_eq!(al.rows[0], vec![1, PAD_TOKEN, 2, 3]);
        assert_eq!(al.rows[1], vec![1, 9, 2, 3]);
        assert_eq!(al.pads[0], vec![false, true, false, false]);
        assert_eq!(al.positions, vec![0, 10, 20, 30]);
        assert_eq!(al.lcs, 3);
    }

    #[test]
    fn identical_revisions_align_without_pads() {
        let al = align_offline(&[4, 5, 6], &[4, 5, 6], 10, 1000).unwrap();
        assert!(al.pads.iter().flatten().all(|p| !p));
    }

    #[test]
    fn coupon_values() {
        assert_eq!(coupon_iterations(1, 1).unwrap(), 1);
        assert_eq!(coupon_iterations(16, 1).unwrap(), 64);
        assert!(coupon_iterations(0, 1).is_err());
        assert!(coupon_iterations(5, 0).is_err());
    }
}
