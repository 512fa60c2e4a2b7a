//! Revision streams: JSONL files of full revisions and atomic edits, and
//! seeded synthetic generators for them.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::EditOp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Record {
    Revision {
        tokens: Vec<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
    },
    Replace { slot: usize, token: u32 },
    Insert { slot: usize, token: u32 },
    Delete { slot: usize },
}

impl Record {
    pub fn revision(tokens: Vec<u32>) -> Self {
        Record::Revision { tokens, seed: None, source: None }
    }

    pub fn edit(&self) -> Option<EditOp> {
        match *self {
            Record::Revision { .. } => None,
            Record::Replace { slot, token } => Some(EditOp::Replace { slot, token }),
            Record::Insert { slot, token } => Some(EditOp::Insert { slot, token }),
            Record::Delete { slot } => Some(EditOp::Delete { slot }),
        }
    }
}

impl From<EditOp> for Record {
    fn from(op: EditOp) -> Self {
        match op {
            EditOp::Replace { slot, token } => Record::Replace { slot, token },
            EditOp::Insert { slot, token } => Record::Insert { slot, token },
            EditOp::Delete { slot } => Record::Delete { slot },
        }
    }
}

/// A self-contained, replayable sequence of records. The first record is
/// always a full revision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevisionStream {
    records: Vec<Record>,
}

impl RevisionStream {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        match records.first() {
            Some(Record::Revision { tokens, .. }) if !tokens.is_empty() => Ok(RevisionStream { records }),
            Some(Record::Revision { .. }) => Err(Error::Stream("first revision is empty".into())),
            Some(_) => Err(Error::Stream("first record must be a revision".into())),
            None => Err(Error::Stream("stream has no records".into())),
        }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| Error::Stream(format!("line {}: {e}", i + 1)))?;
            records.push(record);
        }
        Self::new(records)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Revision records taken two at a time.
    pub fn pairs(&self) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
        let revisions: Vec<&Vec<u32>> = self
            .records
            .iter()
            .map(|r| match r {
                Record::Revision { tokens, .. } => Ok(tokens),
                _ => Err(Error::Stream("pair files hold revision records only".into())),
            })
            .collect::<Result<_>>()?;
        if revisions.len() % 2 != 0 {
            return Err(Error::Stream(format!("{} revisions do not form pairs", revisions.len())));
        }
        Ok(revisions.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect())
    }
}

/// Fractions of replace, insert and delete edits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditMix {
    pub replace: f64,
    pub insert: f64,
    pub delete: f64,
}

impl EditMix {
    pub const REPLACE_ONLY: EditMix = EditMix { replace: 1.0, insert: 0.0, delete: 0.0 };

    pub fn new(replace: f64, insert: f64, delete: f64) -> Result<Self> {
        let parts = [replace, insert, delete];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || ((replace + insert + delete) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue("edit mix must be non-negative fractions summing to 1"));
        }
        Ok(EditMix { replace, insert, delete })
    }

    /// Parses `r,i,d`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidValue("edit mix must be three comma-separated numbers"))?;
        match parts[..] {
            [r, i, d] => Self::new(r, i, d),
            _ => Err(Error::InvalidValue("edit mix must be three comma-separated numbers")),
        }
    }
}

/// Limits of the document a generated stream is replayed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub vocab_size: u32,
    pub max_len: usize,
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Draws one edit for a document of length `len`. A delete on a one-token
/// document and an insert at capacity become replaces.
fn random_edit(rng: &mut ChaCha8Rng, len: usize, mix: EditMix, voc: Vocabulary) -> EditOp {
    let u: f64 = rng.random();
    let slot_draw: f64 = rng.random();
    let token = rng.random_range(0..voc.vocab_size);
    let pick = |n: usize| ((slot_draw * n as f64) as usize).min(n - 1);
    if u < mix.insert && len < voc.max_len {
        EditOp::Insert { slot: pick(len + 1), token }
    } else if u >= mix.insert && u < mix.insert + mix.delete && len > 1 {
        EditOp::Delete { slot: pick(len) }
    } else {
        EditOp::Replace { slot: pick(len), token }
    }
}

/// A base revision of `n` tokens followed by `num_edits` edits at uniformly
/// random slots.
pub fn gen_workload(seed: u64, n: usize, num_edits: usize, mix: EditMix, voc: Vocabulary) -> Result<RevisionStream> {
    if n == 0 || n > voc.max_len || voc.vocab_size == 0 {
        return Err(Error::InvalidValue("document length must be within 1..=max_len"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = vec![Record::Revision {
        tokens: random_tokens(&mut rng, n, voc.vocab_size),
        seed: Some(seed),
        source: Some("synthetic".into()),
    }];
    let mut len = n;
    for _ in 0..num_edits {
        let op = random_edit(&mut rng, len, mix, voc);
        match op {
            EditOp::Insert { .. } => len += 1,
            EditOp::Delete { .. } => len -= 1,
            EditOp::Replace { .. } => {}
        }
        records.push(op.into());
    }
    RevisionStream::new(records)
}

/// Revision pairs over random `n`-token documents. Pair `p` applies
/// `edits[p % edits.len()]` edits to its first revision. Replace edits hit
/// distinct slots and always change the token.
pub fn gen_pairs(seed: u64, n: usize, count: usize, edits: &[usize], mix: EditMix, voc: Vocabulary) -> Result<RevisionStream> {
    if n == 0 || n > voc.max_len || edits.is_empty() || voc.vocab_size < 2 {
        return Err(Error::InvalidValue("pairs need a nonempty edit list and 1..=max_len tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(2 * count);
    for p in 0..count {
        let a = random_tokens(&mut rng, n, voc.vocab_size);
        let mut b = a.clone();
        let mut touched = vec![false; n];
        for _ in 0..edits[p % edits.len()] {
            match random_edit(&mut rng, b.len(), mix, voc) {
                EditOp::Replace { slot, token } => {
                    let fresh = (0..b.len()).map(|i| (slot + i) % b.len()).find(|&s| !touched.get(s).copied().unwrap_or(true));
                    let slot = fresh.unwrap_or(slot);
                    let token = if token == b[slot] { (token + 1) % voc.vocab_size } else { token };
                    b[slot] = token;
                    if let Some(t) = touched.get_mut(slot) {
                        *t = true;
                    }
                }
                EditOp::Insert { slot, token } => {
                    b.insert(slot, token);
                    touched.insert(slot.min(touched.len()), true);
                }
                EditOp::Delete { slot } => {
                    b.remove(slot);
                    touched.remove(slot);
                }
            }
        }
        records.push(Record::Revision { tokens: a, seed: Some(seed), source: Some(format!("pair-{p}")) });
        records.push(Record::revision(b));
    }
    RevisionStream::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    const VOC: Vocabulary = Vocabulary { vocab_size: 100, max_len: 64 };

    #[test]
    fn record_format() {
        let r: Record = serde_json::from_str(r#"{"type":"insert","slot":3,"token":9}"#).unwrap();
        assert_eq!(r.edit(), Some(EditOp::Insert { slot: 3, token: 9 }));
        let r: Record = serde_json::from_str(r#"{"type":"delete","slot":0}"#).unwrap();
        assert_eq!(r.edit(), Some(EditOp::Delete { slot: 0 }));
        assert_eq!(serde_json::to_string(&Record::revision(vec![1, 2])).unwrap(), r#"{"type":"revision","tokens":[1,2]}"#);
        assert!(serde_json::from_str::<Record>(r#"{"type":"delete","slot":0,"token":1}"#).is_err());
    }

    #[test]
    fn stream_must_open_with_revision() {
        assert!(RevisionStream::new(vec![]).is_err());
        assert!(RevisionStream::new(vec![Record::Delete { slot: 0 }]).is_err());
        assert!(RevisionStream::read("{\"type\":\"revision\",\"tokens\":[]}\n".as_bytes()).is_err());
        let s = RevisionStream::read("{\"type\":\"revision\",\"tokens\":[4]}\n\n{\"type\":\"replace\",\"slot\":0,\"token\":1}\n".as_bytes()).unwrap();
        assert_eq!(s.records().len(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let mix = EditMix::new(0.5, 0.25, 0.25).unwrap();
        let a = gen_workload(5, 20, 50, mix, VOC).unwrap().to_jsonl();
        assert_eq!(a, gen_workload(5, 20, 50, mix, VOC).unwrap().to_jsonl());
        assert_ne!(a, gen_workload(6, 20, 50, mix, VOC).unwrap().to_jsonl());
    }

    #[test]
    fn replace_only_mix() {
        let s = gen_workload(1, 10, 40, EditMix::REPLACE_ONLY, VOC).unwrap();
        assert!(s.records()[1..].iter().all(|r| matches!(r, Record::Replace { .. })));
    }

    #[test]
    fn mix_must_sum_to_one() {
        assert!(EditMix::new(0.5, 0.5, 0.5).is_err());
        assert!(EditMix::parse("1,0").is_err());
        assert_eq!(EditMix::parse("0.2, 0.3,0.5").unwrap(), EditMix { replace: 0.2, insert: 0.3, delete: 0.5 });
    }

    #[test]
    fn jsonl_round_trip() {
        let s = gen_workload(2, 8, 10, EditMix::new(0.4, 0.3, 0.3).unwrap(), VOC).unwrap();
        assert_eq!(RevisionStream::read(s.to_jsonl().as_bytes()).unwrap(), s);
    }

    #[test]
    fn pairs_apply_requested_replacements() {
        let s = gen_pairs(3, 30, 8, &[1, 4], EditMix::REPLACE_ONLY, VOC).unwrap();
        for (p, (a, b)) in s.pairs().unwrap().into_iter().enumerate() {
            let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert_eq!(diff, [1, 4][p % 2]);
        }
        assert!(RevisionStream::new(vec![Record::revision(vec![1])]).unwrap().pairs().is_err());
    }
}
