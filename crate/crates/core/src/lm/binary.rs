//! `MSLM1` binary layout, all integers little-endian:
//!
//! ```text
//! magic      b"MSLM1"
//! order      u8
//! vocab_len  u32, then vocab_len x (u32 byte length, UTF-8 bytes), by id
//! counts     order x u64
//! order 1..k records, each order sorted by (parent record, word id):
//!     word   u32
//!     prob   f64  log10
//!     bo     f64  log10
//!     child  u64  first child record in the next order (orders < k only)
//!   orders < k end with one sentinel u64 child index
//! checksum   u64  FNV-1a over every preceding byte
//! ```
//!
//! Unigrams are stored densely by word id, so the children of a record
//! occupy `child[i]..child[i + 1]` in the next order.

use std::path::Path;

use super::{LanguageModel, LmError, LmVocab, NgramEntry, NgramModel, WordId};

const MAGIC: &[u8; 5] = b"MSLM1";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
struct Level {
    words: Vec<WordId>,
    probs: Vec<f64>,
    backoffs: Vec<f64>,
    /// len = records + 1; empty at the highest order.
    children: Vec<u64>,
}

/// Sorted-array trie loaded from a binary file.
#[derive(Debug, Clone)]
pub struct BinaryModel {
    order: usize,
    vocab: LmVocab,
    levels: Vec<Level>,
}

fn binary_err(msg: impl Into<String>) -> LmError {
    LmError::Binary(msg.into())
}

/// Builds the trie levels. Every n-gram's (n-1)-word prefix must be present,
/// and every vocabulary word must have a unigram entry.
fn build_levels(model: &NgramModel) -> Result<Vec<Level>, LmError> {
    let order = model.order();
    let vocab_len = model.vocab().len();
    let mut levels: Vec<Level> = Vec::with_capacity(order);
    // index of each n-gram's record in its level
    let mut index: crate::DetMap<Vec<WordId>, u64> = crate::DetMap::default();

    let mut grams: Vec<(Vec<WordId>, NgramEntry)> = Vec::with_capacity(vocab_len);
    for w in 0..vocab_len as WordId {
        let e = model
            .entry(&[w])
            .ok_or_else(|| binary_err(format!("word {:?} has no unigram entry", model.vocab().word(w))))?;
        grams.push((vec![w], e));
    }
    for n in 1..=order {
        if n > 1 {
            let mut keyed = Vec::with_capacity(model.count(n));
            for (g, e) in model.table(n) {
                let parent = *index.get(&g[..n - 1]).ok_or_else(|| {
                    binary_err(format!("{n}-gram has no stored prefix"))
                })?;
                keyed.push((parent, g.clone(), *e));
            }
            keyed.sort_by(|a, b| (a.0, a.1[n - 1]).cmp(&(b.0, b.1[n - 1])));
            let prev = &mut levels[n - 2];
            let mut children = vec![0u64; prev.words.len() + 1];
            for (parent, _, _) in &keyed {
                children[*parent as usize + 1] += 1;
            }
            for i in 1..children.len() {
                children[i] += children[i - 1];
            }
            prev.children = children;
            grams = keyed.into_iter().map(|(_, g, e)| (g, e)).collect();
        }
        index.clear();
        let mut level = Level {
            words: Vec::with_capacity(grams.len()),
            probs: Vec::with_capacity(grams.len()),
            backoffs: Vec::with_capacity(grams.len()),
            children: Vec::new(),
        };
        for (i, (g, e)) in grams.iter().enumerate() {
            level.words.push(*g.last().unwrap());
            level.probs.push(e.log10_prob);
            level.backoffs.push(e.log10_backoff);
            if n < order {
                index.insert(g.clone(), i as u64);
            }
        }
        levels.push(level);
    }
    Ok(levels)
}

pub fn binarize(model: &NgramModel, path: &Path) -> Result<(), LmError> {
    let levels = build_levels(model)?;
    let order = model.order();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(u8::try_from(order).map_err(|_| binary_err("order exceeds 255"))?);
    let words = model.vocab().words();
    buf.extend_from_slice(&(words.len() as u32).to_le_bytes());
    for w in words {
        buf.extend_from_slice(&(w.len() as u32).to_le_bytes());
        buf.extend_from_slice(w.as_bytes());
    }
    for l in &levels {
        buf.extend_from_slice(&(l.words.len() as u64).to_le_bytes());
    }
    for (n, l) in levels.iter().enumerate() {
        let inner = n + 1 < order;
        for i in 0..l.words.len() {
            buf.extend_from_slice(&l.words[i].to_le_bytes());
            buf.extend_from_slice(&l.probs[i].to_le_bytes());
            buf.extend_from_slice(&l.backoffs[i].to_le_bytes());
            if inner {
                buf.extend_from_slice(&l.children[i].to_le_bytes());
            }
        }
        if inner {
            buf.extend_from_slice(&l.children[l.words.len()].to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    std::fs::write(path, buf).map_err(|source| LmError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], LmError> {
        if self.bytes.len() - self.pos < n {
            return Err(binary_err(format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, LmError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, LmError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, LmError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_binary(path: &Path) -> Result<BinaryModel, LmError> {
    let bytes = std::fs::read(path).map_err(|source| LmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    BinaryModel::from_bytes(&bytes)
}

impl BinaryModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LmError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(binary_err("bad magic, not an MSLM1 file"));
        }
        if bytes.len() < MAGIC.len() + 1 + 8 {
            return Err(binary_err("truncated file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(binary_err("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let order = r.take(1, "order")?[0] as usize;
        if order == 0 {
            return Err(binary_err("order 0"));
        }
        let vocab_len = r.u32("vocabulary size")? as usize;
        let mut vocab = LmVocab::default();
        for id in 0..vocab_len {
            let len = r.u32("vocabulary entry")? as usize;
            let w = std::str::from_utf8(r.take(len, "vocabulary entry")?)
                .map_err(|_| binary_err("vocabulary entry is not UTF-8"))?;
            if vocab.intern(w) as usize != id {
                return Err(binary_err(format!("vocabulary entry {w:?} out of place")));
            }
        }
        let mut counts = Vec::with_capacity(order);
        for _ in 0..order {
            counts.push(r.u64("counts")? as usize);
        }
        if counts[0] != vocab_len {
            return Err(binary_err("unigram count differs from vocabulary size"));
        }
        let mut levels = Vec::with_capacity(order);
        for (n, &count) in counts.iter().enumerate() {
            let inner = n + 1 < order;
            let mut l = Level {
                words: Vec::with_capacity(count),
                probs: Vec::with_capacity(count),
                backoffs: Vec::with_capacity(count),
                children: Vec::with_capacity(if inner { count + 1 } else { 0 }),
            };
            for _ in 0..count {
                l.words.push(r.u32("record")?);
                l.probs.push(r.f64("record")?);
                l.backoffs.push(r.f64("record")?);
                if inner {
                    l.children.push(r.u64("record")?);
                }
            }
            if inner {
                l.children.push(r.u64("sentinel")?);
                let next = counts[n + 1] as u64;
                if l.children.windows(2).any(|w| w[0] > w[1]) || *l.children.last().unwrap() != next {
                    return Err(binary_err(format!("order {} child offsets are inconsistent", n + 1)));
                }
            }
            if l.words.iter().any(|&w| w as usize >= vocab_len) {
                return Err(binary_err("word id out of range"));
            }
            levels.push(l);
        }
        if r.pos != body.len() {
            return Err(binary_err("trailing bytes before checksum"));
        }
        Ok(BinaryModel { order, vocab, levels })
    }

    fn find(&self, ngram: &[WordId]) -> Option<(usize, usize)> {
        let first = ngram[0] as usize;
        if first >= self.levels[0].words.len() {
            return None;
        }
        let mut idx = first;
        for (n, &w) in ngram.iter().enumerate().skip(1) {
            let parent = &self.levels[n - 1];
            let lo = parent.children[idx] as usize;
            let hi = parent.children[idx + 1] as usize;
            let slice = &self.levels[n].words[lo..hi];
            idx = lo + slice.binary_search(&w).ok()?;
        }
        Some((ngram.len() - 1, idx))
    }

    pub fn count(&self, n: usize) -> usize {
        self.levels[n - 1].words.len()
    }
}

impl LanguageModel for BinaryModel {
    fn order(&self) -> usize {
        self.order
    }

    fn vocab(&self) -> &LmVocab {
        &self.vocab
    }

    fn entry(&self, ngram: &[WordId]) -> Option<NgramEntry> {
        if ngram.is_empty() || ngram.len() > self.order {
            return None;
        }
        let (lvl, idx) = self.find(ngram)?;
        let l = &self.levels[lvl];
        Some(NgramEntry {
            log10_prob: l.probs[idx],
            log10_backoff: l.backoffs[idx],
        })
    }
}
