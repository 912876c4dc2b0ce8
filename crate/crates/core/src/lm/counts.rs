use rayon::prelude::*;

use super::{LmError, LmVocab, NgramEntry, NgramModel, WordId, BOS_ID, BOS_LOG10, EOS_ID, UNK_ID};
use crate::corpus::{BOS, EOS};
use crate::DetMap;

/// Sentences per counting block; each block is split into shards counted
/// in parallel and merged.
const SHARD_LINES: usize = 8192;

/// Raw and adjusted n-gram counts for every order up to k.
#[derive(Debug, Clone)]
pub struct CountTable {
    pub order: usize,
    pub vocab: LmVocab,
    /// `raw[n - 1]`: occurrences in `<s> … </s>` padded sentences.
    pub raw: Vec<DetMap<Vec<WordId>, u64>>,
    /// `adjusted[n - 1]`: raw counts at the highest order and for n-grams
    /// starting with `<s>`; distinct left extensions otherwise.
    pub adjusted: Vec<DetMap<Vec<WordId>, u64>>,
    /// n1..n4 over adjusted counts, per order. Unigram `<s>` is excluded.
    pub count_of_counts: Vec<[u64; 4]>,
}

impl CountTable {
    pub fn raw_count(&self, words: &[&str]) -> u64 {
        self.lookup(&self.raw, words)
    }

    pub fn adjusted_count(&self, words: &[&str]) -> u64 {
        self.lookup(&self.adjusted, words)
    }

    fn lookup(&self, maps: &[DetMap<Vec<WordId>, u64>], words: &[&str]) -> u64 {
        if words.is_empty() || words.len() > self.order || words.iter().any(|w| !self.vocab.contains(w)) {
            return 0;
        }
        let ids: Vec<WordId> = words.iter().map(|w| self.vocab.id(w)).collect();
        maps[words.len() - 1].get(&ids).copied().unwrap_or(0)
    }

    pub fn distinct_ngrams(&self) -> usize {
        self.raw.iter().map(|m| m.len()).sum()
    }
}

/// Streams sentences once in fixed-size blocks; memory grows with the
/// number of distinct n-grams, not with corpus size. Literal `<s>`/`</s>`
/// tokens in the input are ignored.
pub fn count_ngrams<I, S>(lines: I, order: usize) -> Result<CountTable, LmError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if order < 1 {
        return Err(LmError::BadOrder);
    }
    let mut vocab = LmVocab::default();
    let mut raw: Vec<DetMap<Vec<WordId>, u64>> = vec![DetMap::default(); order];
    let mut block: Vec<Vec<WordId>> = Vec::with_capacity(SHARD_LINES);
    let mut lines = lines.into_iter();
    loop {
        block.clear();
        for line in lines.by_ref() {
            let mut padded = vec![BOS_ID];
            padded.extend(
                line.as_ref()
                    .split_whitespace()
                    .filter(|t| *t != BOS && *t != EOS)
                    .map(|t| vocab.intern(t)),
            );
            if padded.len() == 1 {
                continue;
            }
            padded.push(EOS_ID);
            block.push(padded);
            if block.len() == SHARD_LINES {
                break;
            }
        }
        if block.is_empty() {
            break;
        }
        let shards: Vec<Vec<DetMap<Vec<WordId>, u64>>> = block
            .par_chunks(SHARD_LINES / 8)
            .map(|chunk| {
                let mut local = vec![DetMap::default(); order];
                for padded in chunk {
                    for n in 1..=order {
                        for gram in padded.windows(n) {
                            *local[n - 1].entry(gram.to_vec()).or_insert(0) += 1;
                        }
                    }
                }
                local
            })
            .collect();
        for shard in shards {
            for (n, table) in shard.into_iter().enumerate() {
                for (g, c) in table {
                    *raw[n].entry(g).or_insert(0) += c;
                }
            }
        }
    }

    let mut adjusted = raw.clone();
    for n in 1..order {
        let mut left_ext: DetMap<Vec<WordId>, u64> = DetMap::default();
        for gram in raw[n].keys() {
            *left_ext.entry(gram[1..].to_vec()).or_insert(0) += 1;
        }
        for (gram, count) in adjusted[n - 1].iter_mut() {
            if gram[0] != BOS_ID {
                *count = left_ext.get(gram).copied().unwrap_or(0);
            }
        }
        adjusted[n - 1].retain(|_, c| *c > 0);
    }

    let count_of_counts = adjusted
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut coc = [0u64; 4];
            for (g, &c) in m {
                if i == 0 && g[0] == BOS_ID {
                    continue;
                }
                if (1..=4).contains(&c) {
                    coc[c as usize - 1] += 1;
                }
            }
            coc
        })
        .collect();

    Ok(CountTable {
        order,
        vocab,
        raw,
        adjusted,
        count_of_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscountFallback {
    /// Three modified Kneser-Ney discounts.
    None,
    /// One discount n1 / (n1 + 2 n2).
    SingleKneserNey,
    /// Absolute discount 0.5.
    Absolute,
}

/// D1, D2, D3+ for one order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discounts {
    pub d: [f64; 3],
    pub fallback: DiscountFallback,
}

impl Discounts {
    /// Modified Kneser-Ney discounts from count-of-counts, falling back to a
    /// single discount (and then to 0.5) when the statistics are degenerate.
    pub fn from_count_of_counts(coc: [u64; 4]) -> Self {
        let [n1, n2, n3, n4] = coc.map(|c| c as f64);
        if n1 > 0.0 && n2 > 0.0 && n3 > 0.0 && n4 > 0.0 {
            let y = n1 / (n1 + 2.0 * n2);
            let d = [1.0 - 2.0 * y * n2 / n1, 2.0 - 3.0 * y * n3 / n2, 3.0 - 4.0 * y * n4 / n3];
            // 0 < D1 <= 1 <= D2 <= 2 <= D3+ <= 3
            let valid = d
                .iter()
                .enumerate()
                .all(|(i, &v)| v.is_finite() && v > 0.0 && v <= (i + 1) as f64);
            if valid {
                return Discounts {
                    d,
                    fallback: DiscountFallback::None,
                };
            }
        }
        if n1 > 0.0 {
            let single = n1 / (n1 + 2.0 * n2);
            return Discounts {
                d: [single; 3],
                fallback: DiscountFallback::SingleKneserNey,
            };
        }
        Discounts {
            d: [0.5; 3],
            fallback: DiscountFallback::Absolute,
        }
    }

    pub fn for_count(&self, c: u64) -> f64 {
        match c {
            0 => 0.0,
            1 => self.d[0],
            2 => self.d[1],
            _ => self.d[2],
        }
    }
}

#[derive(Default, Clone, Copy)]
struct ContextStats {
    total: u64,
    buckets: [u64; 3],
}

/// Interpolated modified Kneser-Ney estimation. Each stored probability is
/// the interpolated value; each context's backoff weight is its
/// interpolation mass, so backoff queries reproduce the interpolated model.
pub fn estimate_mkn(counts: &CountTable) -> (NgramModel, Vec<Discounts>) {
    let order = counts.order;
    let mut model = NgramModel::new(order, counts.vocab.clone());
    let discounts: Vec<Discounts> = counts
        .count_of_counts
        .iter()
        .enumerate()
        .map(|(i, &coc)| {
            let d = Discounts::from_count_of_counts(coc);
            if d.fallback != DiscountFallback::None && !counts.adjusted[i].is_empty() {
                log::warn!(
                    "order {}: degenerate count-of-counts {coc:?}, using {:?} discount {:?}",
                    i + 1,
                    d.fallback,
                    d.d
                );
            }
            d
        })
        .collect();

    // Every word but <s> is predictable, plus <unk> whether or not it was seen.
    let unigram_events = counts.vocab.len() - 1;
    let uniform = 1.0 / unigram_events as f64;

    for n in 1..=order {
        let disc = discounts[n - 1];
        let grams: Vec<(&Vec<WordId>, u64)> = counts.adjusted[n - 1]
            .iter()
            .filter(|(g, _)| !(n == 1 && g[0] == BOS_ID))
            .map(|(g, &c)| (g, c))
            .collect();
        let mut stats: DetMap<&[WordId], ContextStats> = DetMap::default();
        for &(g, c) in &grams {
            let s = stats.entry(&g[..n - 1]).or_default();
            s.total += c;
            s.buckets[(c.min(3) - 1) as usize] += 1;
        }
        let gamma = |s: &ContextStats| {
            (disc.d[0] * s.buckets[0] as f64 + disc.d[1] * s.buckets[1] as f64 + disc.d[2] * s.buckets[2] as f64)
                / s.total as f64
        };
        for &(g, c) in &grams {
            let s = &stats[&g[..n - 1]];
            let lower = if n == 1 {
                uniform
            } else {
                10f64.powf(model.table(n - 1)[&g[1..]].log10_prob)
            };
            let p = (c as f64 - disc.for_count(c)) / s.total as f64 + gamma(s) * lower;
            model.insert(
                g.clone(),
                NgramEntry {
                    log10_prob: p.log10(),
                    log10_backoff: 0.0,
                },
            );
        }
        if n == 1 {
            let mass = stats.get(&[][..]).map(gamma).unwrap_or(1.0);
            if !counts.adjusted[0].contains_key(&vec![UNK_ID]) {
                model.insert(
                    vec![UNK_ID],
                    NgramEntry {
                        log10_prob: (mass * uniform).log10(),
                        log10_backoff: 0.0,
                    },
                );
            }
            model.insert(
                vec![BOS_ID],
                NgramEntry {
                    log10_prob: BOS_LOG10,
                    log10_backoff: 0.0,
                },
            );
        } else {
            for (ctx, s) in &stats {
                let g = gamma(s);
                if let Some(e) = model_entry_mut(&mut model, ctx) {
                    e.log10_backoff = g.log10();
                }
            }
        }
    }
    (model, discounts)
}

fn model_entry_mut<'m>(model: &'m mut NgramModel, ngram: &[WordId]) -> Option<&'m mut NgramEntry> {
    model.tables[ngram.len() - 1].get_mut(ngram)
}
